"""Optimisation-based visualisation of what a network has learned.

All three methods run projected gradient steps on a perturbation of a
source image inside an L2 (or Linf) ball, keep the image in the valid pixel
range, and return the best iterate seen, so the reported objective never
falls behind the starting point.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attacks import ascent_step, project
from .exceptions import ConfigError, DimensionError
from .metrics import GaussianStats
from .models import ParameterStore, forward_logits, forward_representation, predict_representation
from .tensor import Tensor

KINDS = ("activation_max", "activation_set_max", "representation_invert", "class_logit_max")
SOURCES = ("dataset_image", "random_noise", "mvn_sample")


@dataclass(frozen=True)
class VizSettings:
    norm: str = "l2"
    epsilon: float = 1000.0
    step_size: float = 1.0
    iterations: int = 400
    clip: Optional[Tuple[float, float]] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ConfigError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if not self.epsilon > 0 or not self.step_size > 0:
            raise ConfigError("epsilon and step_size must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


FEATURE_DEFAULTS = VizSettings(epsilon=1000.0, step_size=1.0, iterations=400)
INVERSION_DEFAULTS = VizSettings(epsilon=1000.0, step_size=1.0, iterations=10000)
CLASSGEN_DEFAULTS = VizSettings(epsilon=30.0, step_size=0.5, iterations=60)


@dataclass
class VizObjective:
    kind: str
    unit: Optional[int] = None
    units: Optional[Tuple[int, ...]] = None
    target_class: Optional[int] = None
    target_image: Optional[np.ndarray] = None
    source: str = "dataset_image"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source policy {self.source!r}")
        required = {
            "activation_max": {"unit"},
            "activation_set_max": {"units"},
            "representation_invert": {"target_image"},
            "class_logit_max": {"target_class"},
        }[self.kind]
        present = {k for k in ("unit", "units", "target_class", "target_image")
                   if getattr(self, k) is not None}
        if present != required:
            raise ConfigError(f"{self.kind} needs exactly {sorted(required)}, got {sorted(present)}")

    def describe(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "target_image"}
        if self.units is not None:
            d["units"] = list(self.units)
        return d


@dataclass
class VizRun:
    """Result of one batched optimisation.

    ``trace`` has shape (iterations + 1, N): the objective at the source and
    after every step. ``images`` are the best iterates and ``objective``
    their objective values.
    """

    objective: VizObjective
    settings: VizSettings
    trace: np.ndarray
    images: np.ndarray
    objective_values: np.ndarray
    initial: np.ndarray
    maximize: bool
    stagnant: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def final(self) -> np.ndarray:
        return self.objective_values


def _optimize(objective_fn: Callable[[Tensor], Tensor], source: np.ndarray, settings: VizSettings,
              maximize: bool):
    src = np.asarray(source)
    n = len(src)
    sign = 1.0 if maximize else -1.0
    trace = np.empty((settings.iterations + 1, n))
    best_x = src.copy()
    best_v = np.full(n, -np.inf if maximize else np.inf)
    moved = np.zeros(n, dtype=bool)
    delta = np.zeros_like(src)

    def consider(x, values, k):
        trace[k] = values
        better = values > best_v if maximize else values < best_v
        best_v[better] = values[better]
        best_x[better] = x[better]

    for k in range(settings.iterations):
        x = src + delta
        inp = Tensor(x, requires_grad=True)
        values = objective_fn(inp)
        T.backward(values.sum())
        consider(x, values.data.astype(np.float64), k)
        g = inp.grad
        moved |= np.any(g.reshape(n, -1) != 0, axis=1)
        delta = project(ascent_step(delta, sign * g, settings.norm, settings.step_size),
                        settings.norm, settings.epsilon)
        if settings.clip is not None:
            delta = np.clip(src + delta, *settings.clip) - src
    x = src + delta
    with T.no_grad():
        values = objective_fn(Tensor(x)).data.astype(np.float64)
    consider(x, values, settings.iterations)
    stagnant = ~moved if settings.iterations else np.zeros(n, dtype=bool)
    return trace, best_x, best_v, stagnant


def _prepare_source(params: ParameterStore, source) -> np.ndarray:
    src = np.asarray(source, dtype=params.dtype)
    if src.ndim == 3:
        src = src[None]
    if src.shape[1:] != params.spec.input_shape:
        raise DimensionError(f"source shape {src.shape} does not match network input {params.spec.input_shape}")
    return src


def direct_feature_vis(params: ParameterStore, source, unit: Optional[int] = None,
                       units: Optional[Sequence[int]] = None,
                       settings: VizSettings = FEATURE_DEFAULTS, source_policy: str = "dataset_image") -> VizRun:
    """Maximise one representation unit, or the mean of a set of units.

    Samples whose gradient stays exactly zero for every step (a dead unit)
    are flagged in ``VizRun.stagnant``.
    """
    if (unit is None) == (units is None):
        raise ConfigError("pass exactly one of unit or units")
    k = params.spec.representation_width
    chosen = (int(unit),) if unit is not None else tuple(int(u) for u in units)
    if not chosen or any(not 0 <= u < k for u in chosen):
        raise ConfigError(f"units must lie in [0, {k}), got {chosen}")
    objective = (VizObjective("activation_max", unit=chosen[0], source=source_policy) if unit is not None
                 else VizObjective("activation_set_max", units=chosen, source=source_policy))
    frozen = params.frozen()
    idx = np.array(chosen)

    def fn(x):
        return forward_representation(frozen, x, "eval")[:, idx].mean(axis=1)

    src = _prepare_source(params, source)
    trace, images, values, stagnant = _optimize(fn, src, settings, maximize=True)
    return VizRun(objective, settings, trace, images, values, trace[0].copy(), True, stagnant)


def top_activating_images(params: ParameterStore, images: np.ndarray, unit: int, count: int = 8,
                          ids: Optional[np.ndarray] = None, activations: Optional[np.ndarray] = None):
    """Sample ids with the largest and smallest activation of ``unit``.

    Ties are broken by ascending sample id. Returns ``(top_ids, bottom_ids)``.
    """
    k = params.spec.representation_width
    if not 0 <= unit < k:
        raise ConfigError(f"unit must lie in [0, {k}), got {unit}")
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    acts = predict_representation(params, np.asarray(images, dtype=params.dtype))[:, unit] \
        if activations is None else np.asarray(activations)
    top = np.lexsort((ids, -acts.astype(np.float64)))[:count]
    bottom = np.lexsort((ids, acts.astype(np.float64)))[:count]
    return ids[top], ids[bottom]


def representation_inversion(params: ParameterStore, source, target_images,
                             settings: VizSettings = INVERSION_DEFAULTS,
                             source_policy: str = "dataset_image") -> VizRun:
    """Minimise ``|R(x) - R(target)| / |R(target)|`` starting from ``source``.

    ``source`` and ``target_images`` are paired row by row.

    Raises:
        ConfigError: a target has an all-zero representation.
    """
    src = _prepare_source(params, source)
    targ = _prepare_source(params, target_images)
    if len(src) != len(targ):
        raise DimensionError(f"{len(src)} sources but {len(targ)} targets")
    r_targ = predict_representation(params, targ).astype(params.dtype)
    norms = np.sqrt((r_targ.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise ConfigError("target representation has zero norm; the normalised distance is undefined")
    frozen = params.frozen()
    r_t = Tensor(r_targ)
    inv = Tensor((1.0 / norms).astype(params.dtype))

    def fn(x):
        diff = forward_representation(frozen, x, "eval") - r_t
        return T.l2_norm(diff, axis=1) * inv

    objective = VizObjective("representation_invert", target_image=targ, source=source_policy)
    trace, images, values, stagnant = _optimize(fn, src, settings, maximize=False)
    return VizRun(objective, settings, trace, images, values, trace[0].copy(), False, stagnant)


def class_specific_generation(params: ParameterStore, target_class: int, source,
                              settings: VizSettings = CLASSGEN_DEFAULTS,
                              source_policy: str = "mvn_sample") -> VizRun:
    """Maximise the logit of ``target_class`` starting from ``source``."""
    c = params.spec.num_classes
    if not 0 <= target_class < c:
        raise ConfigError(f"target_class must lie in [0, {c}), got {target_class}")
    frozen = params.frozen()

    def fn(x):
        return forward_logits(frozen, x, "eval")[:, int(target_class)]

    src = _prepare_source(params, source)
    objective = VizObjective("class_logit_max", target_class=int(target_class), source=source_policy)
    trace, images, values, stagnant = _optimize(fn, src, settings, maximize=True)
    return VizRun(objective, settings, trace, images, values, trace[0].copy(), True, stagnant)


# -- starting points ------------------------------------------------------------------
def mvn_fit(images: np.ndarray) -> GaussianStats:
    """Gaussian over flattened pixel vectors: sample mean and 1/n covariance.

    Raises:
        ValueError: fewer than two images.
    """
    images = np.asarray(images)
    if len(images) < 2:
        raise ValueError(f"need at least 2 images to fit a distribution, got {len(images)}")
    return GaussianStats.fit(images.reshape(len(images), -1))


def mvn_factor(stats: GaussianStats, ridge: float = 1e-6) -> np.ndarray:
    """Symmetric factor L with ``L @ L.T == cov + ridge * I``."""
    cov = stats.cov + ridge * np.eye(stats.dim) if ridge else stats.cov
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def mvn_sample(stats: GaussianStats, seed: int = 0, count: Optional[int] = None, shape=None,
               ridge: float = 1e-6, clip: Optional[Tuple[float, float]] = (0.0, 1.0),
               factor: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw ``mean + L z`` with standard normal ``z``, reshaped to ``shape``.

    Returns a single sample when ``count`` is None, otherwise a batch.
    """
    rng = np.random.default_rng(seed)
    m = 1 if count is None else int(count)
    L = mvn_factor(stats, ridge) if factor is None else factor
    z = rng.standard_normal((m, stats.dim))
    out = stats.mean + z @ L.T
    if clip is not None:
        out = np.clip(out, *clip)
    if shape is not None:
        out = out.reshape((m,) + tuple(shape))
    return out[0] if count is None else out


def class_mvn_sources(images: np.ndarray, labels: np.ndarray, target_class: int, count: int,
                      seed: int = 0, ridge: float = 1e-6) -> np.ndarray:
    """MVN starting points fitted on the images of one class."""
    subset = np.asarray(images)[np.asarray(labels) == target_class]
    stats = mvn_fit(subset)
    return mvn_sample(stats, seed=seed, count=count, shape=subset.shape[1:], ridge=ridge).astype(np.float32)


def random_noise_sources(shape, count: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count,) + tuple(shape)).astype(np.float32)
