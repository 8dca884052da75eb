"""Embedding-space adversary: normalised projected gradient ascent.

Perturbations live on the summed token+position embeddings and every norm is
taken per example (Frobenius norm over the seq x d slab).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .minibert import ModelParams, embed, forward
from .tensor import Tensor, backward, cross_entropy

MODES = ("pgd", "freelb_accumulate")
DEGENERATE_GRAD = 1e-12


@dataclass(frozen=True)
class AdvConfig:
    eps0: float = 0.05
    steps: int = 5
    step_size: float = 0.01
    ball_radius: float | None = None    # None: unconstrained
    mode: str = "freelb_accumulate"

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.ball_radius is not None and not self.ball_radius > 0:
            raise ValueError("ball_radius must be positive when set")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class Perturbation:
    delta: np.ndarray
    step_index: int = 0


def _example_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a * a).reshape(a.shape[0], -1).sum(axis=1)).reshape((-1,) + (1,) * (a.ndim - 1))


def init_perturbation(shape, cfg: AdvConfig, rng: np.random.Generator) -> Perturbation:
    """Uniform(-1, 1) noise rescaled so each example's norm is exactly eps0."""
    u = rng.uniform(-1.0, 1.0, size=tuple(shape))
    norms = _example_norms(u)
    return Perturbation(u / np.where(norms > 0, norms, 1.0) * cfg.eps0, 0)


def project_frobenius(delta: np.ndarray, eps: float) -> np.ndarray:
    """Rescale examples whose norm exceeds ``eps`` back onto the ball."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    norms = _example_norms(delta)
    scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    out = delta * scale
    # rounding can leave the rescaled norm an ulp above eps; nudge it inside so
    # a second projection is a no-op
    over = _example_norms(out) > eps
    while over.any():
        out = np.where(over, out * (1.0 - 2.0 ** -52), out)
        over = _example_norms(out) > eps
    return out


def pgd_step(p: Perturbation, grad: np.ndarray, cfg: AdvConfig) -> Perturbation:
    """delta += step_size * g / ||g|| per example; examples with ~zero gradient stay put."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.delta.shape:
        raise ValueError(f"gradient shape {grad.shape} != perturbation shape {p.delta.shape}")
    norms = _example_norms(grad)
    live = norms >= DEGENERATE_GRAD
    step = np.where(live, grad / np.where(live, norms, 1.0), 0.0) * cfg.step_size
    delta = p.delta + step
    if cfg.ball_radius is not None:
        delta = project_frobenius(delta, cfg.ball_radius)
    return Perturbation(delta, p.step_index + 1)


def _delta_grad(tokens, labels, params: ModelParams, delta: np.ndarray) -> tuple[float, np.ndarray]:
    d = Tensor(delta, requires_grad=True)
    loss = cross_entropy(forward(tokens, params, d), labels)
    backward(loss, wrt=[d])
    return loss.item(), d.grad


def adversarial_loss(tokens, labels, params: ModelParams, cfg: AdvConfig,
                     rng: np.random.Generator) -> tuple[Tensor, Perturbation]:
    """Cross-entropy at the perturbation reached after ``cfg.steps`` ascent steps.

    The returned loss is still attached to the model parameters; call
    ``backward`` on it for the outer update.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    shape = tokens.shape + (params.config.hidden,)
    p = init_perturbation(shape, cfg, rng)
    for _ in range(cfg.steps):
        _, g = _delta_grad(tokens, labels, params, p.delta)
        p = pgd_step(p, g, cfg)
    return cross_entropy(forward(tokens, params, Tensor(p.delta)), labels), p


def freelb_accumulate(tokens, labels, params: ModelParams, cfg: AdvConfig,
                      rng: np.random.Generator) -> tuple[float, Perturbation]:
    """Average parameter gradients over the losses at delta_1 .. delta_s.

    Gradients are added into the leaves' ``.grad`` (existing contents are kept)
    and the mean loss is returned.  One backward per pass yields both the
    parameter contribution and the gradient driving the next ascent step.
    """
    if cfg.steps < 1:
        raise ValueError("freelb_accumulate needs steps >= 1")
    tokens = np.atleast_2d(np.asarray(tokens))
    shape = tokens.shape + (params.config.hidden,)
    p = init_perturbation(shape, cfg, rng)
    _, g = _delta_grad(tokens, labels, params, p.delta)
    s = cfg.steps
    total = 0.0
    for k in range(s):
        p = pgd_step(p, g, cfg)
        d = Tensor(p.delta, requires_grad=k < s - 1)
        loss = cross_entropy(forward(tokens, params, d), labels)
        backward(loss, seed=1.0 / s)
        total += loss.item()
        if k < s - 1:
            g = d.grad * s
    return total / s, p
