"""Fréchet distance between Gaussian feature statistics, FID and feature-space distances.

Everything here runs in float64.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import DimensionError, FormatError
from .models import ParameterStore, predict_representation

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-8
PSD_TOL = 1e-8
FID_RIDGE = 1e-6

# Number of times a negative eigenvalue was clamped to zero in a square root.
clamp_counter = {"negative_eigenvalues": 0}


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise DimensionError(f"covariance {self.cov.shape} does not match mean of length {d}")

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def fit(cls, samples: np.ndarray, ridge: float = 0.0) -> "GaussianStats":
        """Mean and covariance with the 1/n normalisation, rows as observations."""
        x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        if len(x) == 0:
            raise ValueError("cannot fit Gaussian statistics to an empty set")
        mu = x.mean(axis=0)
        centred = x - mu
        cov = centred.T @ centred / len(x)
        if ridge:
            cov = cov + ridge * np.eye(cov.shape[0])
        return cls(mu, cov, len(x))


def symmetrize(m: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix.

    Uses the symmetric eigendecomposition; eigenvalues down to -1e-8 (relative
    to the largest) are treated as round-off and clamped to zero.

    Raises:
        ValueError: the input is not symmetric, or has a clearly negative
            eigenvalue.
    """
    m = symmetrize(m)
    w, v = np.linalg.eigh(m)
    floor = -PSD_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < floor:
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3e})")
    neg = int(np.count_nonzero(w < 0))
    if neg:
        clamp_counter["negative_eigenvalues"] += neg
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((A B)^(1/2)) for PSD A, B via Tr((A^(1/2) B A^(1/2))^(1/2))."""
    ra = matrix_sqrt_psd(a)
    inner = ra @ symmetrize(b) @ ra
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    neg = int(np.count_nonzero(w < 0))
    if neg:
        clamp_counter["negative_eigenvalues"] += neg
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``, clamped at zero."""
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (mu1.size, mu1.size):
        raise DimensionError(
            f"dimension mismatch: means {mu1.shape} / {mu2.shape}, covariances {sigma1.shape} / {sigma2.shape}")
    diff = mu1 - mu2
    value = float(diff @ diff) + float(np.trace(sigma1) + np.trace(sigma2)) \
        - 2.0 * trace_sqrt_product(sigma1, sigma2)
    return max(value, 0.0)


def frechet_distance_stats(a: GaussianStats, b: GaussianStats) -> float:
    return frechet_distance(a.mean, a.cov, b.mean, b.cov)


class FeatureExtractor:
    """Penultimate-layer features of a fixed, trained network."""

    def __init__(self, params: ParameterStore, version: str = "unversioned", batch_size: int = 256):
        self.params = params
        self.version = version
        self.batch_size = batch_size

    @property
    def dim(self) -> int:
        return self.params.spec.representation_width

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=self.params.dtype)
        if images.ndim == 3:
            images = images[None]
        return predict_representation(self.params, images, self.batch_size).astype(np.float64)


def feature_stats(features: np.ndarray, ridge: float = FID_RIDGE) -> GaussianStats:
    return GaussianStats.fit(features, ridge=ridge)


def fid_from_features(real: np.ndarray, generated: np.ndarray, ridge: float = FID_RIDGE) -> float:
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(real) == 0 or len(generated) == 0:
        raise ValueError("FID needs non-empty feature sets")
    if real.shape[1] != generated.shape[1]:
        raise DimensionError(f"feature dimensions differ: {real.shape[1]} vs {generated.shape[1]}")
    d = real.shape[1]
    if min(len(real), len(generated)) < d + 1:
        warnings.warn(f"fewer than d+1={d + 1} samples; covariance is rank deficient",
                      RuntimeWarning, stacklevel=2)
    return frechet_distance_stats(feature_stats(real, ridge), feature_stats(generated, ridge))


def fid(extractor: FeatureExtractor, real_images: np.ndarray, generated_images: np.ndarray,
        ridge: float = FID_RIDGE) -> float:
    """Fréchet distance between Gaussian fits of extractor features of both sets."""
    if len(real_images) == 0 or len(generated_images) == 0:
        raise ValueError("FID needs non-empty image sets")
    return fid_from_features(extractor(real_images), extractor(generated_images), ridge)


def feature_l2_distance(extractor: FeatureExtractor, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between extractor features; batched inputs give one value per pair."""
    a = np.asarray(a)
    b = np.asarray(b)
    single = a.ndim == 3
    fa, fb = extractor(a), extractor(b)
    dist = np.sqrt(((fa - fb) ** 2).sum(axis=1))
    return float(dist[0]) if single else dist


# -- feature files --------------------------------------------------------------------
def write_features(features: np.ndarray, path) -> None:
    """Flat binary: u64 dimension, u64 count, then float64 rows (little-endian)."""
    f = np.ascontiguousarray(np.asarray(features, dtype="<f8"))
    if f.ndim != 2:
        raise DimensionError(f"features must be (count, d), got {f.shape}")
    Path(path).write_bytes(struct.pack("<QQ", f.shape[1], f.shape[0]) + f.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: feature file shorter than its header")
    d, count = struct.unpack_from("<QQ", raw, 0)
    if len(raw) - 16 != 8 * d * count:
        raise FormatError(f"{path}: expected {8 * d * count} payload bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(count, d).copy()


def load_feature_source(path, extractor: Optional[FeatureExtractor] = None) -> np.ndarray:
    """Features from a ``.feat`` file, or extracted from a directory of PPM images."""
    from .data import read_ppm_dir

    path = Path(path)
    if path.is_file():
        return read_features(path)
    if extractor is None:
        raise ValueError(f"{path} is an image directory; an extractor is required")
    return extractor(read_ppm_dir(path))
