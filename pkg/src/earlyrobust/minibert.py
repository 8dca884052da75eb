"""Miniature post-norm transformer encoder with head / neuron importance gates.

Each attention head's output is multiplied by a learnable scalar and each FFN
intermediate neuron's activation by another; setting a gate to zero is
equivalent to removing the structure, which is what makes the gates usable as
structured-pruning scores.

Weight layout (per layer, ``H`` active heads, ``F`` active neurons)::

    w_q, w_k, w_v : (H, d, d_h)     x @ w_q[i] gives head i's queries
    w_o           : (H, d_h, d)
    w_u           : (d, F)
    w_d           : (F, d)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    gelu,
    layer_norm,
    matmul,
    softmax_rows,
    take_rows,
)

PAD_ID = 0
UNK_ID = 1
INIT_SCALE = 0.05
LN_EPS = 1e-5
_MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    hidden: int = 32
    ffn_dim: int | None = None
    vocab_size: int = 200
    max_seq_len: int = 32
    n_classes: int = 2

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_u: Tensor
    w_d: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    TENSORS = ("w_q", "w_k", "w_v", "w_o", "w_u", "w_d",
               "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.w_u.shape[1]


@dataclass
class Coefficients:
    head: list[Tensor]
    neuron: list[Tensor]

    def copy(self) -> "Coefficients":
        return Coefficients([Tensor(t.data.copy(), t.requires_grad) for t in self.head],
                            [Tensor(t.data.copy(), t.requires_grad) for t in self.neuron])


@dataclass
class ModelParams:
    """All weights of one model, plus which original heads/neurons survive.

    ``head_index[l]`` / ``neuron_index[l]`` map the active structures of layer
    ``l`` back to their positions in the unpruned model.
    """

    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]
    cls_w: Tensor
    cls_b: Tensor
    coefficients: Coefficients
    head_index: list[np.ndarray] = field(default_factory=list)
    neuron_index: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.head_index:
            self.head_index = [np.arange(l.n_heads) for l in self.layers]
        if not self.neuron_index:
            self.neuron_index = [np.arange(l.n_neurons) for l in self.layers]

    @property
    def head_counts(self) -> list[int]:
        return [l.n_heads for l in self.layers]

    @property
    def neuron_counts(self) -> list[int]:
        return [l.n_neurons for l in self.layers]

    @property
    def is_pruned(self) -> bool:
        c = self.config
        return any(n != c.n_heads for n in self.head_counts) or any(
            n != c.ffn_dim for n in self.neuron_counts)

    def named_tensors(self, coefficients: bool = True) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{name}", getattr(layer, name)) for name in LayerParams.TENSORS)
        out.extend([("cls_w", self.cls_w), ("cls_b", self.cls_b)])
        if coefficients:
            for i, (ch, cf) in enumerate(zip(self.coefficients.head, self.coefficients.neuron)):
                out.append((f"layer{i}.c_head", ch))
                out.append((f"layer{i}.c_neuron", cf))
        return out

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def copy(self) -> "ModelParams":
        def cp(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), t.requires_grad)

        layers = [LayerParams(**{n: cp(getattr(l, n)) for n in LayerParams.TENSORS}) for l in self.layers]
        return ModelParams(self.config, cp(self.tok_emb), cp(self.pos_emb), layers,
                           cp(self.cls_w), cp(self.cls_b), self.coefficients.copy(),
                           [h.copy() for h in self.head_index],
                           [n.copy() for n in self.neuron_index])


def _uniform(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape), requires_grad=True)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Seeded uniform(-0.05, 0.05) init; norms start at identity, gates at 1."""
    d, h, dh, f = config.hidden, config.n_heads, config.head_dim, config.ffn_dim
    tok = _uniform(rng, (config.vocab_size, d))
    pos = _uniform(rng, (config.max_seq_len, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            w_q=_uniform(rng, (h, d, dh)),
            w_k=_uniform(rng, (h, d, dh)),
            w_v=_uniform(rng, (h, d, dh)),
            w_o=_uniform(rng, (h, dh, d)),
            w_u=_uniform(rng, (d, f)),
            w_d=_uniform(rng, (f, d)),
            ln1_gain=Tensor(np.ones(d), True),
            ln1_bias=Tensor(np.zeros(d), True),
            ln2_gain=Tensor(np.ones(d), True),
            ln2_bias=Tensor(np.zeros(d), True),
        ))
    cls_w = _uniform(rng, (d, config.n_classes))
    cls_b = Tensor(np.zeros(config.n_classes), True)
    coef = Coefficients([Tensor(np.ones(h), True) for _ in range(config.n_layers)],
                        [Tensor(np.ones(f), True) for _ in range(config.n_layers)])
    return ModelParams(config, tok, pos, layers, cls_w, cls_b, coef)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def embed(tokens, params: ModelParams) -> Tensor:
    """Token plus learned position embedding, shape (batch, seq, d)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    seq = tokens.shape[1]
    if seq > params.config.max_seq_len:
        raise ShapeError(f"sequence length {seq} exceeds max_seq_len={params.config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.config.vocab_size):
        raise IndexError("token id out of range")
    return take_rows(params.tok_emb, tokens) + take_rows(params.pos_emb, np.arange(seq))


def key_mask_bias(tokens) -> np.ndarray:
    """Additive attention bias that hides padding keys, shape (batch, 1, 1, seq)."""
    tokens = np.atleast_2d(np.asarray(tokens))
    valid = tokens != PAD_ID
    valid[~valid.any(axis=1)] = True
    return np.where(valid, 0.0, _MASK_FILL)[:, None, None, :]


def mha_forward(x: Tensor, layer: LayerParams, c_head: Tensor, attn_bias=None) -> Tensor:
    """Gated multi-head attention: sum_i c_head[i] * head_i(x) @ w_o[i].

    Residual and normalisation are left to the caller.
    """
    if x.shape[-1] != layer.w_q.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != model width {layer.w_q.shape[1]}")
    n_heads = layer.n_heads
    if c_head.shape != (n_heads,):
        raise ShapeError(f"need {n_heads} head coefficients, got shape {c_head.shape}")
    b, t, d = x.shape
    dh = layer.w_q.shape[2]

    def fused(w: Tensor) -> Tensor:               # (H, d, dh) -> (d, H*dh)
        return w.swapaxes(0, 1).reshape(d, n_heads * dh)

    def split(z: Tensor) -> Tensor:               # (b, t, H*dh) -> (b, H, t, dh)
        return z.reshape(b, t, n_heads, dh).swapaxes(1, 2)

    q = split(matmul(x, fused(layer.w_q)))
    k = split(matmul(x, fused(layer.w_k)))
    v = split(matmul(x, fused(layer.w_v)))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if attn_bias is not None:
        scores = scores + Tensor(attn_bias)
    ctx = matmul(softmax_rows(scores), v) * c_head.reshape(1, n_heads, 1, 1)
    # gating before w_o is the same sum of gated per-head projections
    merged = ctx.swapaxes(1, 2).reshape(b, t, n_heads * dh)
    return matmul(merged, layer.w_o.reshape(n_heads * dh, d))


def ffn_forward(x: Tensor, layer: LayerParams, c_neuron: Tensor) -> Tensor:
    """Gated feed-forward: (gelu(x @ w_u) * c_neuron) @ w_d."""
    if c_neuron.shape != (layer.n_neurons,):
        raise ShapeError(f"need {layer.n_neurons} neuron coefficients, got shape {c_neuron.shape}")
    if x.shape[-1] != layer.w_u.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != model width {layer.w_u.shape[0]}")
    return matmul(gelu(matmul(x, layer.w_u)) * c_neuron, layer.w_d)


def encode(x: Tensor, params: ModelParams, attn_bias=None) -> Tensor:
    coef = params.coefficients
    for layer, ch, cf in zip(params.layers, coef.head, coef.neuron):
        x = layer_norm(x + mha_forward(x, layer, ch, attn_bias), layer.ln1_gain, layer.ln1_bias, LN_EPS)
        x = layer_norm(x + ffn_forward(x, layer, cf), layer.ln2_gain, layer.ln2_bias, LN_EPS)
    return x


def pool_weights(tokens) -> np.ndarray:
    """Mean-pool weights over non-pad positions, shape (batch, seq, 1)."""
    tokens = np.atleast_2d(np.asarray(tokens))
    valid = (tokens != PAD_ID).astype(np.float64)
    empty = valid.sum(axis=1) == 0
    valid[empty] = 1.0
    return (valid / valid.sum(axis=1, keepdims=True))[:, :, None]


def forward(tokens, params: ModelParams, delta=None) -> Tensor:
    """Logits of shape (batch, n_classes); ``delta`` is added to the embeddings."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    x = embed(tokens, params)
    if delta is not None:
        if delta.shape != x.shape:
            raise ShapeError(f"perturbation shape {delta.shape} != embedding shape {x.shape}")
        x = x + delta
    h = encode(x, params, key_mask_bias(tokens))
    pooled = (h * Tensor(pool_weights(tokens))).sum(axis=1)
    return matmul(pooled, params.cls_w) + params.cls_b


def predict_proba(tokens, params: ModelParams) -> np.ndarray:
    z = forward(tokens, params).data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def param_count(params: ModelParams, exclude_embeddings: bool = False) -> int:
    """Scalar weights in the model, gates excluded."""
    total = 0
    for name, t in params.named_tensors(coefficients=False):
        if exclude_embeddings and name in ("tok_emb", "pos_emb"):
            continue
        total += t.size
    return total
