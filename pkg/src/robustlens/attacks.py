"""Projected gradient descent attacks inside L2 and Linf balls."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .models import ParameterStore, forward_logits
from .tensor import Tensor

LogitFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation ball and PGD schedule.

    ``epsilon`` is the ball radius in input units, ``step_size`` the ascent
    step and ``iterations`` the number of PGD steps. ``normalized=False``
    switches to raw-gradient steps (``delta + step_size * g``) for L2.
    ``clip`` is the valid pixel range applied to ``x + delta`` after the last
    step, or ``None`` to disable clipping.
    """

    norm: str = "l2"
    epsilon: float = 0.5
    step_size: float = 0.1
    iterations: int = 7
    random_init: bool = True
    seed: int = 0
    normalized: bool = True
    clip: Optional[Tuple[float, float]] = (0.0, 1.0)

    def __post_init__(self):
        norm = self.norm.lower()
        if norm in ("2", "l_2"):
            norm = "l2"
        if norm in ("inf", "linfinity", "l_inf"):
            norm = "linf"
        object.__setattr__(self, "norm", norm)
        if norm not in ("l2", "linf"):
            raise ConfigError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if not self.epsilon > 0 or not self.step_size > 0:
            raise ConfigError("epsilon and step_size must be positive")
        if int(self.iterations) < 1:
            raise ConfigError("iterations must be >= 1")
        if self.clip is not None:
            object.__setattr__(self, "clip", tuple(float(v) for v in self.clip))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


def as_logit_fn(model: Union[ParameterStore, LogitFn], mode: str = "eval") -> LogitFn:
    """Wrap a parameter store (weights frozen) or pass a callable through."""
    if isinstance(model, ParameterStore):
        frozen = model.frozen()
        return lambda x: forward_logits(frozen, x, mode)
    return model


def _flat_norms(a: np.ndarray, norm: str) -> np.ndarray:
    flat = a.reshape(len(a), -1)
    if norm == "l2":
        return np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    return np.abs(flat).max(axis=1)


def perturbation_norms(delta: np.ndarray, norm: str) -> np.ndarray:
    """Per-sample norm of a batched perturbation."""
    return _flat_norms(np.asarray(delta), norm)


def project(delta: np.ndarray, norm: str, epsilon: float, batched: bool = True) -> np.ndarray:
    """Project onto the ball of radius ``epsilon``.

    L2 rescales samples whose norm exceeds ``epsilon``; Linf clamps each
    element. With ``batched`` the first axis indexes independent samples.
    Points already inside the ball are returned unchanged.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    delta = np.asarray(delta)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm != "l2":
        raise ConfigError(f"unknown norm {norm!r}")
    d = delta if batched else delta[None]
    norms = _flat_norms(d, "l2")
    over = norms > epsilon
    if not over.any():
        return delta
    out = d.copy()
    # shave a few ulps so the rounded result never lands outside the ball
    shrink = 1.0 - 4.0 * float(np.finfo(d.dtype).eps)
    scale = (epsilon / norms[over] * shrink).astype(d.dtype)
    out[over] = d[over] * scale.reshape((-1,) + (1,) * (d.ndim - 1))
    return out if batched else out[0]


def random_init(shape, norm: str, epsilon: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform sample from the ball, one per leading index.

    L2 draws a Gaussian direction and a radius ``epsilon * u**(1/d)``; Linf
    draws each element uniformly in ``[-epsilon, epsilon]``.
    """
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=shape).astype(dtype)
    n, d = shape[0], int(np.prod(shape[1:]))
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    delta = (direction * radius).reshape(shape).astype(dtype)
    return project(delta, "l2", epsilon)


def ascent_step(delta: np.ndarray, g: np.ndarray, norm: str, step: float, normalized: bool = True) -> np.ndarray:
    """One un-projected ascent step; samples with zero gradient stay put."""
    if norm == "linf":
        return delta + step * np.sign(g)
    if not normalized:
        return delta + step * g
    gn = _flat_norms(g, "l2")
    safe = np.where(gn > 0, gn, 1.0)
    direction = g / safe.reshape((-1,) + (1,) * (g.ndim - 1)).astype(g.dtype)
    return delta + step * direction


def loss_gradient(logit_fn: LogitFn, x: np.ndarray, delta: np.ndarray, y: np.ndarray):
    """Cross-entropy (batch sum) and its gradient w.r.t. ``delta``."""
    d = Tensor(delta, requires_grad=True)
    loss = T.cross_entropy(logit_fn(Tensor(x) + d), y, reduction="sum")
    loss.backward()
    return float(loss.data), d.grad


def pgd_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None):
    """Maximise the classification loss within the ball around ``x``.

    Args:
        model: a :class:`ParameterStore` (evaluated in eval mode, weights
            frozen) or a callable mapping an input tensor to logits.
        x: clean batch, shape (N, ...).
        y: integer labels, shape (N,).
        cfg: ball, radius, step and iteration count.
        rng: random stream for the initial point; defaults to one seeded
            from ``cfg.seed``.

    Returns:
        ``(x_adv, delta)`` with ``x_adv = clip(x + delta)`` and ``delta``
        recomputed as ``x_adv - x`` so it stays inside the ball.
    """
    logit_fn = as_logit_fn(model)
    x = np.asarray(x)
    y = np.asarray(y)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if cfg.random_init:
        delta = random_init(x.shape, cfg.norm, cfg.epsilon, rng, x.dtype)
    else:
        delta = np.zeros_like(x)
    for _ in range(int(cfg.iterations)):
        _, g = loss_gradient(logit_fn, x, delta, y)
        delta = project(ascent_step(delta, g, cfg.norm, cfg.step_size, cfg.normalized),
                        cfg.norm, cfg.epsilon)
    x_adv = x + delta
    if cfg.clip is not None:
        x_adv = np.clip(x_adv, cfg.clip[0], cfg.clip[1])
    return x_adv.astype(x.dtype, copy=False), (x_adv - x).astype(x.dtype, copy=False)


def random_perturbation(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    """``x`` plus a random direction scaled to exactly the ball radius (L2) or
    random signs of magnitude epsilon (Linf), clipped like an attack."""
    if cfg.norm == "linf":
        delta = cfg.epsilon * np.sign(rng.standard_normal(x.shape))
    else:
        delta = rng.standard_normal(x.shape)
        delta *= (cfg.epsilon / _flat_norms(delta, "l2")).reshape((-1,) + (1,) * (x.ndim - 1))
    out = x + delta.astype(x.dtype)
    if cfg.clip is not None:
        out = np.clip(out, cfg.clip[0], cfg.clip[1])
    return out.astype(x.dtype)
