"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError


def check_images(X, shape: Optional[Sequence[int]] = None, dtype=np.float32, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite (N, C, H, W) array of ``dtype``.

    A single (C, H, W) image is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True, input_name=name,
                    ensure_min_samples=0)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"{name} must be (N, C, H, W) images, got {X.ndim}-d array")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise DimensionError(f"{name} images have shape {X.shape[1:]}, expected {tuple(shape)}")
    return X


def check_labels(y, n_samples: int, n_classes: Optional[int] = None, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise DimensionError(f"{name} must be 1-d with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} must hold integer class indices")
        y = y.astype(np.int64)
    if n_classes is not None and len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise IndexError(f"{name} values must lie in [0, {n_classes})")
    return y.astype(np.int64, copy=False)


def check_pixel_range(X: np.ndarray, low: float = 0.0, high: float = 1.0, name: str = "X") -> None:
    if X.size and (X.min() < low or X.max() > high):
        raise ValueError(f"{name} values must lie in [{low}, {high}]")
