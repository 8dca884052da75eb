"""Turning gate trajectories into structured subnetworks.

L1 pressure on the gates, magnitude-based masks, the normalised Hamming
distance between consecutive masks, the early-stop detector built on it, and
structural pruning / reset of the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .minibert import Coefficients, LayerParams, ModelConfig, ModelParams, init_params
from .tensor import Tensor

HEAD_SCOPES = ("global_with_survivor", "layer_wise")
NEURON_SCOPES = ("global", "layer_wise")


class PruneError(ValueError):
    """A pruning request cannot be satisfied."""


@dataclass(frozen=True)
class RegConfig:
    lambda_head: float = 1e-4
    lambda_neuron: float = 1e-4

    def __post_init__(self):
        if self.lambda_head < 0 or self.lambda_neuron < 0:
            raise ValueError("regularisation strengths must be non-negative")


@dataclass(frozen=True)
class PruneConfig:
    head_ratio: float = 1 / 6
    neuron_ratio: float = 0.3
    head_scope: str = "global_with_survivor"
    neuron_scope: str = "global"

    def __post_init__(self):
        for name in ("head_ratio", "neuron_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {r}")
        if self.head_scope not in HEAD_SCOPES:
            raise ValueError(f"head_scope must be one of {HEAD_SCOPES}")
        if self.neuron_scope not in NEURON_SCOPES:
            raise ValueError(f"neuron_scope must be one of {NEURON_SCOPES}")


@dataclass(frozen=True)
class Mask:
    """Per-layer keep flags (1 = keep) for heads and FFN neurons."""

    head: tuple[np.ndarray, ...]
    neuron: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "head", tuple(np.asarray(m, dtype=np.int8) for m in self.head))
        object.__setattr__(self, "neuron", tuple(np.asarray(m, dtype=np.int8) for m in self.neuron))

    @classmethod
    def ones(cls, head_counts, neuron_counts) -> "Mask":
        return cls(tuple(np.ones(n) for n in head_counts), tuple(np.ones(n) for n in neuron_counts))

    def kept_heads(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.head]

    def kept_neurons(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.neuron]

    def pruned_counts(self) -> tuple[int, int]:
        return (sum(int((m == 0).sum()) for m in self.head),
                sum(int((m == 0).sum()) for m in self.neuron))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return (len(self.head) == len(other.head)
                and all(np.array_equal(a, b) for a, b in zip(self.head, other.head))
                and len(self.neuron) == len(other.neuron)
                and all(np.array_equal(a, b) for a, b in zip(self.neuron, other.neuron)))

    __hash__ = None


# ---------------------------------------------------------------------------
# regulariser
# ---------------------------------------------------------------------------


def regularizer(coef: Coefficients, reg: RegConfig) -> Tensor:
    """lambda_head * sum|c_head| + lambda_neuron * sum|c_neuron|, differentiable."""
    total = Tensor(0.0)
    if reg.lambda_head:
        for c in coef.head:
            total = total + c.abs().sum() * reg.lambda_head
    if reg.lambda_neuron:
        for c in coef.neuron:
            total = total + c.abs().sum() * reg.lambda_neuron
    return total


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def prune_count(ratio: float, n: int) -> int:
    """floor(ratio * n), tolerant of round-off such as 0.3 * 10 = 2.9999999999999996."""
    return math.floor(ratio * n + 1e-9)


def _prune_order(scores: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (layer, index) pairs sorted by |score| ascending, ties by position."""
    flat = np.concatenate([np.abs(np.asarray(s, dtype=np.float64)) for s in scores]) if scores else np.zeros(0)
    layer = np.concatenate([np.full(len(s), i) for i, s in enumerate(scores)]) if scores else np.zeros(0, int)
    index = np.concatenate([np.arange(len(s)) for s in scores]) if scores else np.zeros(0, int)
    order = np.argsort(flat, kind="stable")
    return order, layer, index


def select_global_with_survivor(scores: list[np.ndarray], k: int) -> list[np.ndarray]:
    """Prune the k smallest-|score| units without ever emptying a layer."""
    sizes = [len(s) for s in scores]
    if k > sum(sizes) - sum(1 for n in sizes if n > 0):
        raise PruneError(f"cannot prune {k} of {sum(sizes)} heads while keeping one per layer")
    keep = [np.ones(n, dtype=np.int8) for n in sizes]
    left = list(sizes)
    order, layer, index = _prune_order(scores)
    pruned = 0
    for j in order:
        if pruned == k:
            break
        l, i = layer[j], index[j]
        if left[l] <= 1:
            continue
        keep[l][i] = 0
        left[l] -= 1
        pruned += 1
    return keep


def select_global(scores: list[np.ndarray], k: int) -> list[np.ndarray]:
    sizes = [len(s) for s in scores]
    keep = [np.ones(n, dtype=np.int8) for n in sizes]
    order, layer, index = _prune_order(scores)
    for j in order[:k]:
        keep[layer[j]][index[j]] = 0
    return keep


def select_layer_wise(scores: list[np.ndarray], ratio: float) -> list[np.ndarray]:
    keep = []
    for s in scores:
        m = np.ones(len(s), dtype=np.int8)
        k = prune_count(ratio, len(s))
        m[np.argsort(np.abs(np.asarray(s, dtype=np.float64)), kind="stable")[:k]] = 0
        keep.append(m)
    return keep


def head_keep(scores: list[np.ndarray], cfg: PruneConfig) -> list[np.ndarray]:
    if cfg.head_scope == "layer_wise":
        return select_layer_wise(scores, cfg.head_ratio)
    k = prune_count(cfg.head_ratio, sum(len(s) for s in scores))
    return select_global_with_survivor(scores, k)


def neuron_keep(scores: list[np.ndarray], cfg: PruneConfig) -> list[np.ndarray]:
    if cfg.neuron_scope == "layer_wise":
        keep = select_layer_wise(scores, cfg.neuron_ratio)
    else:
        keep = select_global(scores, prune_count(cfg.neuron_ratio, sum(len(s) for s in scores)))
    if keep and not any(m.any() for m in keep):
        raise PruneError("pruning would remove every FFN neuron in the model")
    return keep


def binarize(coef: Coefficients, cfg: PruneConfig) -> Mask:
    """The keep-mask that pruning at ``cfg`` would draw from these gates."""
    heads = head_keep([c.data for c in coef.head], cfg)
    neurons = neuron_keep([c.data for c in coef.neuron], cfg)
    return Mask(tuple(heads), tuple(neurons))


# ---------------------------------------------------------------------------
# distance and early stopping
# ---------------------------------------------------------------------------


def mask_distance(a: Mask, b: Mask) -> tuple[float, float]:
    """Normalised Hamming distance for heads and for neurons."""

    def dist(xs, ys) -> float:
        if len(xs) != len(ys) or any(len(x) != len(y) for x, y in zip(xs, ys)):
            raise ValueError("masks have different layer-wise lengths")
        total = sum(len(x) for x in xs)
        if total == 0:
            return 0.0
        return sum(int((x != y).sum()) for x, y in zip(xs, ys)) / total

    return dist(a.head, b.head), dist(a.neuron, b.neuron)


@dataclass
class ConvergenceDetector:
    """Stops the search once consecutive masks agree ``window`` times in a row.

    Both distances must be strictly below ``gamma`` for an update to count;
    anything else resets the streak.  The first mask only sets a baseline.
    """

    gamma: float = 0.1
    window: int = 5
    prev_mask: Mask | None = None
    consecutive_hits: int = 0
    history: list[tuple[float, float]] = field(default_factory=list)

    def observe(self, head_dist: float, neuron_dist: float) -> bool:
        self.history.append((float(head_dist), float(neuron_dist)))
        if head_dist < self.gamma and neuron_dist < self.gamma:
            self.consecutive_hits += 1
        else:
            self.consecutive_hits = 0
        return self.consecutive_hits >= self.window

    def update_mask(self, mask: Mask) -> bool:
        prev, self.prev_mask = self.prev_mask, mask
        if prev is None:
            return False
        return self.observe(*mask_distance(prev, mask))

    def update(self, coef: Coefficients, cfg: PruneConfig) -> bool:
        return self.update_mask(binarize(coef, cfg))

    @property
    def terminated(self) -> bool:
        return self.consecutive_hits >= self.window


def detector_update(det: ConvergenceDetector, coef: Coefficients, cfg: PruneConfig) -> str:
    return "terminate" if det.update(coef, cfg) else "continue"


def format_trace_line(miniepoch: int, head_dist: float, neuron_dist: float, hits: int) -> str:
    return f"miniepoch={miniepoch} head_dist={head_dist:.6f} neuron_dist={neuron_dist:.6f} hits={hits}"


def parse_trace(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        kv = dict(tok.split("=", 1) for tok in line.split())
        rows.append({"miniepoch": int(kv["miniepoch"]), "head_dist": float(kv["head_dist"]),
                     "neuron_dist": float(kv["neuron_dist"]), "hits": int(kv["hits"])})
    return rows


# ---------------------------------------------------------------------------
# structural pruning
# ---------------------------------------------------------------------------


def apply_mask(params: ModelParams, mask: Mask) -> ModelParams:
    """New params with the masked-out heads (incl. their w_o) and neurons removed."""
    if len(mask.head) != len(params.layers) or len(mask.neuron) != len(params.layers):
        raise PruneError("mask layer count does not match the model")
    out = params.copy()
    for l, layer in enumerate(out.layers):
        hk, nk = mask.head[l], mask.neuron[l]
        if len(hk) != layer.n_heads or len(nk) != layer.n_neurons:
            raise PruneError(f"mask for layer {l} does not match its head/neuron counts")
        hi, ni = np.flatnonzero(hk), np.flatnonzero(nk)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            t = getattr(layer, name)
            setattr(layer, name, Tensor(t.data[hi], t.requires_grad))
        layer.w_u = Tensor(layer.w_u.data[:, ni], layer.w_u.requires_grad)
        layer.w_d = Tensor(layer.w_d.data[ni], layer.w_d.requires_grad)
        ch, cf = out.coefficients.head[l], out.coefficients.neuron[l]
        out.coefficients.head[l] = Tensor(ch.data[hi], ch.requires_grad)
        out.coefficients.neuron[l] = Tensor(cf.data[ni], cf.requires_grad)
        out.head_index[l] = out.head_index[l][hi]
        out.neuron_index[l] = out.neuron_index[l][ni]
    return out


def prune_heads(params: ModelParams, cfg: PruneConfig) -> tuple[ModelParams, list[np.ndarray]]:
    keep = head_keep([c.data for c in params.coefficients.head], cfg)
    mask = Mask(tuple(keep), tuple(np.ones(n) for n in params.neuron_counts))
    return apply_mask(params, mask), list(mask.head)


def prune_neurons(params: ModelParams, cfg: PruneConfig) -> tuple[ModelParams, list[np.ndarray]]:
    keep = neuron_keep([c.data for c in params.coefficients.neuron], cfg)
    mask = Mask(tuple(np.ones(n) for n in params.head_counts), tuple(keep))
    return apply_mask(params, mask), list(mask.neuron)


@dataclass
class TicketSpec:
    mask: Mask
    source_checkpoint: str
    search_steps_used: int
    prune_config: PruneConfig
    converged: bool = True

    def __post_init__(self):
        if self.search_steps_used <= 0:
            raise ValueError("a ticket needs at least one search step")
        for l, m in enumerate(self.mask.head):
            if len(m) and not m.any():
                raise PruneError(f"ticket leaves layer {l} without heads")

    def to_text(self) -> str:
        p = self.prune_config
        lines = [
            "format: earlybird-ticket v1",
            f"source_checkpoint: {self.source_checkpoint}",
            f"search_steps_used: {self.search_steps_used}",
            f"converged: {int(self.converged)}",
            f"prune: head_ratio={p.head_ratio!r} neuron_ratio={p.neuron_ratio!r} "
            f"head_scope={p.head_scope} neuron_scope={p.neuron_scope}",
            "layer_sizes: " + " ".join(f"{len(h)}/{len(n)}" for h, n in zip(self.mask.head, self.mask.neuron)),
        ]
        for l, (h, n) in enumerate(zip(self.mask.kept_heads(), self.mask.kept_neurons())):
            lines.append(f"layer{l}.heads: " + " ".join(map(str, h)))
            lines.append(f"layer{l}.neurons: " + " ".join(map(str, n)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TicketSpec":
        kv = {}
        for line in text.splitlines():
            if ":" in line:
                k, v = line.split(":", 1)
                kv[k.strip()] = v.strip()
        if kv.get("format") != "earlybird-ticket v1":
            raise ValueError("not a ticket file")
        pk = dict(tok.split("=", 1) for tok in kv["prune"].split())
        prune = PruneConfig(float(pk["head_ratio"]), float(pk["neuron_ratio"]),
                            pk["head_scope"], pk["neuron_scope"])
        heads, neurons = [], []
        for l, size in enumerate(kv["layer_sizes"].split()):
            nh, nn = (int(x) for x in size.split("/"))
            h = np.zeros(nh, dtype=np.int8)
            h[[int(i) for i in kv[f"layer{l}.heads"].split()]] = 1
            n = np.zeros(nn, dtype=np.int8)
            n[[int(i) for i in kv[f"layer{l}.neurons"].split()]] = 1
            heads.append(h)
            neurons.append(n)
        return cls(Mask(tuple(heads), tuple(neurons)), kv["source_checkpoint"],
                   int(kv["search_steps_used"]), prune, bool(int(kv.get("converged", "1"))))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TicketSpec":
        return cls.from_text(Path(path).read_text())


def extract_ticket(theta0: ModelParams, mask: Mask) -> ModelParams:
    """Structurally apply ``mask`` to the initial weights, gates reset to 1."""
    if theta0.is_pruned:
        raise PruneError("extract_ticket expects the unpruned initial checkpoint")
    if [len(m) for m in mask.head] != theta0.head_counts or [len(m) for m in mask.neuron] != theta0.neuron_counts:
        raise PruneError("mask does not match the checkpoint's configuration")
    ticket = apply_mask(theta0, mask)
    for c in ticket.coefficients.head + ticket.coefficients.neuron:
        c.data = np.ones_like(c.data)
    return ticket


# ---------------------------------------------------------------------------
# ablation tickets
# ---------------------------------------------------------------------------


def random_ticket(config: ModelConfig, cfg: PruneConfig, rng: np.random.Generator,
                  max_tries: int = 10_000) -> Mask:
    """Uniform random mask with the same prune counts and head survivor rule."""
    L = config.n_layers

    def sample(per_layer: int, ratio: float, scope: str, survivor: bool) -> list[np.ndarray]:
        if scope == "layer_wise":
            out = []
            for _ in range(L):
                m = np.ones(per_layer, dtype=np.int8)
                m[rng.choice(per_layer, prune_count(ratio, per_layer), replace=False)] = 0
                out.append(m)
            return out
        total = L * per_layer
        k = prune_count(ratio, total)
        if survivor and k > total - L:
            raise PruneError(f"cannot prune {k} of {total} heads while keeping one per layer")
        for _ in range(max_tries):
            flat = np.ones(total, dtype=np.int8)
            flat[rng.choice(total, k, replace=False)] = 0
            out = [flat[l * per_layer:(l + 1) * per_layer].copy() for l in range(L)]
            if all(m.any() for m in out) if survivor else any(m.any() for m in out):
                return out
        raise PruneError("random sampling could not satisfy the survivor constraint")

    heads = sample(config.n_heads, cfg.head_ratio, cfg.head_scope, survivor=True)
    neurons = sample(config.ffn_dim, cfg.neuron_ratio, cfg.neuron_scope, survivor=False)
    return Mask(tuple(heads), tuple(neurons))


REINIT_MODES = ("reinit_ticket_weights", "reinit_complement")


def reinit_ticket(ticket: ModelParams, mode: str, rng: np.random.Generator,
                  theta0: ModelParams | None = None) -> ModelParams:
    """Initialisation / structure ablations.

    ``reinit_ticket_weights`` draws fresh weights for the ticket's own shapes.
    ``reinit_complement`` returns the full-size model whose weights outside the
    ticket are freshly drawn while the ticket's weights keep their ``theta0``
    values; ``theta0`` is required for this mode.
    """
    if mode not in REINIT_MODES:
        raise ValueError(f"mode must be one of {REINIT_MODES}")
    fresh = init_params(ticket.config, rng)
    if mode == "reinit_ticket_weights":
        mask = Mask(tuple(np.isin(np.arange(ticket.config.n_heads), h) for h in ticket.head_index),
                    tuple(np.isin(np.arange(ticket.config.ffn_dim), n) for n in ticket.neuron_index))
        return extract_ticket(fresh, mask)
    if theta0 is None:
        raise ValueError("reinit_complement needs the theta0 checkpoint")
    full = fresh
    src = theta0
    for name in ("tok_emb", "pos_emb", "cls_w", "cls_b"):
        getattr(full, name).data = getattr(src, name).data.copy()
    for l, (dst, org) in enumerate(zip(full.layers, src.layers)):
        hi, ni = ticket.head_index[l], ticket.neuron_index[l]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            getattr(dst, name).data[hi] = getattr(org, name).data[hi]
        dst.w_u.data[:, ni] = org.w_u.data[:, ni]
        dst.w_d.data[ni] = org.w_d.data[ni]
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            getattr(dst, name).data = getattr(org, name).data.copy()
    return full
