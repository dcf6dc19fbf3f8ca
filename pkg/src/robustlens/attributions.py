"""Gradient attributions: Integrated Gradients, Expected Gradients, exact Shapley values.

All explainers take either a :class:`ParameterStore` or a callable mapping
an input tensor (N, ...) to logits (N, C). The explained score is the
softmax probability of the target class unless ``score="logit"``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .attacks import as_logit_fn
from .exceptions import ConfigError, DimensionError, FormatError
from .tensor import Tensor

MAP_MAGIC = b"RLAM"
MAP_VERSION = 1
MAX_SHAPLEY_FEATURES = 12


@dataclass
class AttributionConfig:
    method: str = "integrated_gradients"
    steps: int = 50
    samples: int = 200
    baseline: str = "zeros"
    target: Union[str, int] = "predicted"
    score: str = "softmax"
    normalization: str = "interval"
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("integrated_gradients", "expected_gradients"):
            raise ConfigError(f"unknown attribution method {self.method!r}")
        if self.steps < 1 or self.samples < 1:
            raise ConfigError("steps and samples must be >= 1")
        if self.baseline not in ("zeros", "uniform_noise", "dataset_sample"):
            raise ConfigError(f"unknown baseline policy {self.baseline!r}")
        if self.score not in ("softmax", "logit"):
            raise ConfigError(f"score must be 'softmax' or 'logit', got {self.score!r}")
        if self.normalization not in ("interval", "m_plus_one"):
            raise ConfigError(f"normalization must be 'interval' or 'm_plus_one', got {self.normalization!r}")


@dataclass
class AttributionMap:
    """Signed per-input contributions ``values`` (same shape as the input)."""

    values: np.ndarray
    target: int
    score_input: float
    score_baseline: Optional[float]
    method: str
    metadata: dict = field(default_factory=dict)

    def channel_sum(self) -> np.ndarray:
        return self.values.sum(axis=0) if self.values.ndim == 3 else self.values

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def sidecar(self) -> dict:
        d = asdict(self)
        d.pop("values")
        d["shape"] = list(self.values.shape)
        return d

    def save(self, path) -> None:
        """Write ``path`` (binary block) and ``path + '.json'`` (metadata)."""
        path = Path(path)
        path.write_bytes(encode_map(self.values, self.method))
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AttributionMap":
        path = Path(path)
        values, method = decode_map(path.read_bytes())
        meta = json.loads(Path(str(path) + ".json").read_text())
        if meta.get("method") != method:
            raise FormatError(f"method tag {method!r} disagrees with sidecar {meta.get('method')!r}")
        return cls(values, meta["target"], meta["score_input"], meta["score_baseline"],
                   method, meta.get("metadata", {}))


def encode_map(values: np.ndarray, method: str) -> bytes:
    tag = method.encode("ascii")
    values = np.ascontiguousarray(values, dtype="<f8")
    head = MAP_MAGIC + struct.pack("<IH", MAP_VERSION, len(tag)) + tag
    head += struct.pack("<I", values.ndim) + struct.pack(f"<{values.ndim}Q", *values.shape)
    return head + values.tobytes()


def decode_map(raw: bytes):
    if raw[:4] != MAP_MAGIC:
        raise FormatError("not an attribution map (bad magic)")
    version, tag_len = struct.unpack_from("<IH", raw, 4)
    if version != MAP_VERSION:
        raise FormatError(f"unsupported attribution map version {version}")
    pos = 10
    method = raw[pos: pos + tag_len].decode("ascii")
    pos += tag_len
    (rank,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    shape = struct.unpack_from(f"<{rank}Q", raw, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - pos != 8 * count:
        raise FormatError(f"payload holds {len(raw) - pos} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=pos).reshape(shape).copy(), method


# -- score gradients ----------------------------------------------------------------
def _score_fn(logits: Tensor, target: int, score: str) -> Tensor:
    if score == "softmax":
        return T.softmax(logits)[:, target]
    if score == "logit":
        return logits[:, target]
    raise ConfigError(f"score must be 'softmax' or 'logit', got {score!r}")


def score_gradients(model, points: np.ndarray, target: int, score: str = "softmax",
                    batch_size: int = 64):
    """Score values and input gradients at each row of ``points``."""
    logit_fn = as_logit_fn(model)
    values = np.empty(len(points))
    grads = np.empty_like(points)
    for i in range(0, len(points), batch_size):
        inp = Tensor(points[i: i + batch_size], requires_grad=True)
        s = _score_fn(logit_fn(inp), target, score)
        values[i: i + batch_size] = s.data
        T.backward(s.sum())
        grads[i: i + batch_size] = inp.grad
    return values, grads


def model_scores(model, points: np.ndarray, target: int, score: str = "softmax",
                 batch_size: int = 256) -> np.ndarray:
    logit_fn = as_logit_fn(model)
    out = []
    with T.no_grad():
        for i in range(0, len(points), batch_size):
            out.append(_score_fn(logit_fn(Tensor(points[i: i + batch_size])), target, score).data)
    return np.concatenate(out)


def resolve_target(model, x: np.ndarray, target) -> int:
    if target is None or target == "predicted":
        logit_fn = as_logit_fn(model)
        with T.no_grad():
            return int(np.argmax(logit_fn(Tensor(x[None])).data[0]))
    return int(target)


def _check_target(model, x, target: int) -> None:
    logit_fn = as_logit_fn(model)
    with T.no_grad():
        c = logit_fn(Tensor(x[None])).shape[1]
    if not 0 <= target < c:
        raise ConfigError(f"target {target} outside [0, {c})")


# -- Integrated Gradients -------------------------------------------------------------
def integrated_gradients(model, x: np.ndarray, baseline: Optional[np.ndarray] = None,
                         target=None, steps: int = 50, score: str = "softmax",
                         normalization: str = "interval", batch_size: int = 64) -> AttributionMap:
    """Integrated Gradients along the straight path from ``baseline`` to ``x``.

    Gradients are taken at ``baseline + (i / steps) * (x - baseline)`` for
    ``i = 0..steps`` and combined with the trapezoidal rule. The step width
    is ``1 / steps`` for ``normalization="interval"``; ``"m_plus_one"`` uses
    ``1 / (steps + 1)``, which scales the whole map by ``steps / (steps + 1)``.

    Args:
        model: parameter store or logit callable.
        x: one input without batch axis.
        baseline: reference input; zeros when omitted.
        target: class index, or None/"predicted" for the arg-max class at ``x``.
        steps: number of trapezoid intervals ``m``.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    if baseline.shape != x.shape:
        raise DimensionError(f"baseline shape {baseline.shape} differs from input shape {x.shape}")
    target = resolve_target(model, x, target)
    _check_target(model, x, target)
    diff = x - baseline
    alphas = np.arange(steps + 1, dtype=np.float64) / steps
    points = (baseline[None] + alphas.reshape((-1,) + (1,) * x.ndim) * diff[None]).astype(x.dtype)
    values, grads = score_gradients(model, points, target, score, batch_size)
    if normalization == "interval":
        width = 1.0 / steps
    elif normalization == "m_plus_one":
        width = 1.0 / (steps + 1)
    else:
        raise ConfigError(f"normalization must be 'interval' or 'm_plus_one', got {normalization!r}")
    trapezoid = 2.0 * grads.sum(axis=0, dtype=np.float64) - grads[0] - grads[-1]
    avg_grad = 0.5 * width * trapezoid
    return AttributionMap(
        values=(diff * avg_grad).astype(np.float64),
        target=target,
        score_input=float(values[-1]),
        score_baseline=float(values[0]),
        method="integrated_gradients",
        metadata={"steps": int(steps), "score": score, "normalization": normalization},
    )


# -- Expected Gradients ---------------------------------------------------------------
def expected_gradients(model, x: np.ndarray, background: np.ndarray, samples: int = 200,
                       target=None, seed: int = 0, score: str = "softmax",
                       batch_size: int = 64) -> AttributionMap:
    """Monte-Carlo Expected Gradients.

    Draws ``samples`` pairs of a reference ``x'`` (uniformly from
    ``background``) and ``alpha ~ U(0, 1)`` and averages
    ``(x - x') * dF(x' + alpha (x - x')) / dx``.
    """
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    x = np.asarray(x)
    background = np.asarray(background, dtype=x.dtype)
    if len(background) == 0:
        raise ConfigError("background set is empty")
    if background.shape[1:] != x.shape:
        raise DimensionError(f"background rows {background.shape[1:]} differ from input {x.shape}")
    target = resolve_target(model, x, target)
    _check_target(model, x, target)
    rng = np.random.default_rng(seed)
    ref_idx = rng.integers(0, len(background), size=samples)
    alphas = rng.uniform(0.0, 1.0, size=samples)
    refs = background[ref_idx]
    diffs = x[None] - refs
    points = (refs + alphas.reshape((-1,) + (1,) * x.ndim) * diffs).astype(x.dtype)
    _, grads = score_gradients(model, points, target, score, batch_size)
    values = (diffs.astype(np.float64) * grads).mean(axis=0)
    score_x = float(model_scores(model, x[None], target, score)[0])
    score_ref = float(model_scores(model, background, target, score).mean())
    return AttributionMap(
        values=values,
        target=target,
        score_input=score_x,
        score_baseline=score_ref,
        method="expected_gradients",
        metadata={"samples": int(samples), "seed": int(seed), "score": score,
                  "background_size": int(len(background))},
    )


# -- exact Shapley values ---------------------------------------------------------------
def exact_shapley(model_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                  baseline: np.ndarray) -> np.ndarray:
    """Shapley values by enumerating all 2**n feature coalitions.

    Features outside a coalition take their ``baseline`` value. ``model_fn``
    maps a (B, n) batch of feature vectors to (B,) scores.

    Raises:
        ConfigError: more than 12 features.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    baseline = np.asarray(baseline, dtype=np.float64).ravel()
    n = x.size
    if baseline.size != n:
        raise DimensionError(f"baseline has {baseline.size} features, input has {n}")
    if n > MAX_SHAPLEY_FEATURES:
        raise ConfigError(f"exact Shapley enumeration refused for n={n} > {MAX_SHAPLEY_FEATURES}")
    subsets = np.arange(2 ** n)
    bits = ((subsets[:, None] >> np.arange(n)) & 1).astype(bool)
    values = np.asarray(model_fn(np.where(bits, x, baseline)), dtype=np.float64).ravel()
    sizes = bits.sum(axis=1)
    weight = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
                       for k in range(n)])
    phi = np.empty(n)
    for j in range(n):
        without = subsets[~bits[:, j]]
        phi[j] = np.sum(weight[sizes[without]] * (values[without | (1 << j)] - values[without]))
    return phi


# -- rendering ----------------------------------------------------------------------
COLD = np.array([0.230, 0.299, 0.754])
NEUTRAL = np.array([0.865, 0.865, 0.865])
WARM = np.array([0.706, 0.016, 0.150])


def diverging_colors(v: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to RGB: cold below zero, neutral at zero, warm above."""
    v = np.clip(v, -1.0, 1.0)[..., None]
    pos = np.maximum(v, 0.0)
    neg = np.maximum(-v, 0.0)
    return NEUTRAL + pos * (WARM - NEUTRAL) + neg * (COLD - NEUTRAL)


def render_attribution(amap: Union[AttributionMap, np.ndarray], image: Optional[np.ndarray] = None,
                       alpha: float = 0.7) -> np.ndarray:
    """Heat-map overlay as an (H, W, 3) uint8 buffer.

    Channel attributions are summed per pixel and scaled by the largest
    magnitude. Without ``image`` the bare colour map is returned; with an
    image the map is alpha-blended over its grayscale version.
    """
    values = amap.channel_sum() if isinstance(amap, AttributionMap) else np.asarray(amap)
    if values.ndim == 3:
        values = values.sum(axis=0)
    peak = np.abs(values).max()
    scaled = values / peak if peak > 0 else np.zeros_like(values, dtype=np.float64)
    rgb = diverging_colors(scaled)
    if image is not None:
        image = np.asarray(image, dtype=np.float64)
        gray = image.mean(axis=0) if image.ndim == 3 else image
        if gray.shape != values.shape:
            raise DimensionError(f"image {image.shape} does not match attribution map {values.shape}")
        rgb = alpha * rgb + (1.0 - alpha) * np.clip(gray, 0.0, 1.0)[..., None]
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
