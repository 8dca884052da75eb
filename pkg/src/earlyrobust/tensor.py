"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every op that touches a tensor with ``requires_grad=True`` records a node
carrying its inputs and a backward rule.  ``backward(loss)`` collects the
nodes reachable from the loss into a :class:`GradTape` (creation order) and
replays it in reverse, summing gradients into leaf ``.grad`` arrays.

Only the operations the encoder classifier needs are provided; broadcasting
is limited to what numpy does for ``+``, ``*`` and batched ``@``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "GradTape",
    "tensor",
    "matmul",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "cross_entropy",
    "take_rows",
    "backward",
    "grad_check",
    "format_tensor",
    "parse_tensor",
]

_node_ids = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@dataclass(eq=False)
class _Node:
    id: int
    inputs: tuple["Tensor", ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    output: "Tensor | None" = None


class Tensor:
    """A float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_lift(other))

    def __rsub__(self, other):
        return _add(_lift(other), -self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return _mul(self, Tensor(1.0 / np.asarray(other, dtype=np.float64)))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    # reductions and reshaping -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(out, (self,), rule)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return _make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return _make(np.abs(self.data), (self,), lambda g: (g * sign,))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = None
    if out.requires_grad:
        out._node = _Node(next(_node_ids), inputs, rule, out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy-broadcast over the rest."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if a.ndim > 2 and b.ndim == 2:
        # one GEMM over the flattened leading axes instead of a broadcast batch
        lead = int(np.prod(sa[:-1]))
        a2 = ad.reshape(lead, sa[-1])

        def rule2(g):
            g2 = g.reshape(lead, sb[-1])
            return (g2 @ bd.T).reshape(sa), a2.T @ g2

        return _make((a2 @ bd).reshape(sa[:-1] + (sb[-1],)), (a, b), rule2)

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(ad @ bd, (a, b), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF computed through erf."""
    x = _lift(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def rule(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = _lift(x)
    if x.ndim < 1:
        raise ShapeError("softmax_rows needs rank >= 1")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean / unit variance, then affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + bias.data, (x, gain, bias), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"need (n, C) logits and n labels, got {logits.shape} / {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.array(loss), (logits,), rule)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``ids.shape + (d,)``."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row id out of range for table with {n} rows")
    shape = table.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), rule)


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------


class GradTape:
    """Recorded ops reachable from one output, in creation order."""

    def __init__(self, nodes: list[_Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        seen: set[int] = set()
        nodes: list[_Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda nd: nd.id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, out: Tensor, seed: float = 1.0, wrt: Iterable[Tensor] | None = None) -> None:
        targets = None if wrt is None else {id(t) for t in wrt}
        grads: dict[int, np.ndarray] = {id(out): np.full(out.shape, float(seed))}

        def deposit(t: Tensor, g: np.ndarray) -> None:
            if t._node is not None:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            elif t.requires_grad and (targets is None or id(t) in targets):
                t.grad = g.copy() if t.grad is None else t.grad + g

        if out._node is None:
            deposit(out, grads.pop(id(out)))
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.rule(g)):
                if gi is not None and inp.requires_grad:
                    deposit(inp, gi)


def backward(loss: Tensor, seed: float = 1.0, wrt: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(seed * loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``wrt`` restricts accumulation to the given leaves; other leaves are left
    untouched (useful when only an input gradient is wanted).
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    GradTape.from_output(loss).replay(loss, seed=seed, wrt=wrt)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |central difference|)``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    backward(f(xt))
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        num = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# text serialisation
# ---------------------------------------------------------------------------


def format_tensor(arr) -> str:
    """``shape: d1 d2 ...`` then row-major values at 17 significant digits."""
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=np.float64)
    lines = ["shape: " + " ".join(str(n) for n in a.shape)]
    width = a.shape[-1] if a.ndim else 1
    flat = a.reshape(-1)
    for start in range(0, flat.size, max(width, 1)):
        lines.append(" ".join(f"{v:.17g}" for v in flat[start:start + width]))
    return "\n".join(lines) + "\n"


def parse_tensor(text: str) -> np.ndarray:
    lines = text.strip("\n").split("\n")
    head = lines[0]
    if not head.startswith("shape:"):
        raise ValueError(f"expected 'shape:' header, got {head!r}")
    shape = tuple(int(tok) for tok in head[len("shape:"):].split())
    values = np.array(" ".join(lines[1:]).split(), dtype=np.float64)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"shape {shape} wants {int(np.prod(shape))} values, got {values.size}")
    return values.reshape(shape)
