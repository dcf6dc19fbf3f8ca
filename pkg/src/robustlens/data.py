"""Datasets: CIFAR-10 binary batches, a synthetic shapes generator, PPM images."""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError, FormatError

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
CIFAR10_RECORD = 1 + 3 * 32 * 32
SHAPE_CLASSES = ["circle", "square", "triangle", "cross"]

PathLike = Union[str, os.PathLike]


@dataclass
class Dataset:
    """Images in [0, 1] laid out (N, C, H, W) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: List[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.class_names:
            self.class_names = [str(i) for i in range(int(self.labels.max(initial=-1)) + 1)]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigError("labels outside the class range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], list(self.class_names), self.split)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def of_class(self, label: int) -> np.ndarray:
        return self.images[self.class_indices(label)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        h.update("\0".join(self.class_names).encode())
        return h.hexdigest()

    def save(self, path: PathLike) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, images=self.images, labels=self.labels,
                     class_names=np.array(self.class_names), split=np.array(self.split))

    @classmethod
    def load(cls, path: PathLike) -> "Dataset":
        path = Path(path)
        if path.is_dir() or path.suffix == ".bin":
            return load_cifar10(path)
        with np.load(path, allow_pickle=False) as z:
            return cls(z["images"], z["labels"], [str(c) for c in z["class_names"]], str(z["split"]))


# -- CIFAR-10 -----------------------------------------------------------------------
def _parse_cifar_bytes(raw: bytes, source: str):
    if len(raw) % CIFAR10_RECORD:
        offset = (len(raw) // CIFAR10_RECORD) * CIFAR10_RECORD
        raise FormatError(
            f"{source}: length {len(raw)} is not a multiple of {CIFAR10_RECORD}; "
            f"incomplete record at offset {offset}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"{source}: label {labels[bad]} out of range at offset {bad * CIFAR10_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(path: PathLike, split: Optional[str] = None) -> Dataset:
    """Read CIFAR-10 binary batches.

    ``path`` is a single ``.bin`` file or a directory holding
    ``data_batch_*.bin`` (train) and ``test_batch.bin`` (test). Each record
    is one label byte followed by 1024 red, 1024 green and 1024 blue bytes.
    """
    path = Path(path)
    if path.is_dir():
        split = split or "train"
        names = sorted(path.glob("data_batch_*.bin")) if split == "train" else [path / "test_batch.bin"]
        files = [p for p in names if p.exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} batches in {path}")
    else:
        files = [path]
        split = split or ("test" if "test" in path.name else "train")
    parts = [_parse_cifar_bytes(p.read_bytes(), str(p)) for p in files]
    images = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 3, 32, 32), np.float32)
    labels = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    meta = (path if path.is_dir() else path.parent) / "batches.meta.txt"
    names = CIFAR10_CLASSES
    if meta.exists():
        listed = [line.strip() for line in meta.read_text().splitlines() if line.strip()]
        if len(listed) == 10:
            names = listed
    return Dataset(images, labels, list(names), split)


def cifar10_record(label: int, image_u8: np.ndarray) -> bytes:
    """Encode one (3, 32, 32) uint8 image as a CIFAR-10 binary record."""
    image_u8 = np.asarray(image_u8, dtype=np.uint8)
    if image_u8.shape != (3, 32, 32):
        raise FormatError(f"CIFAR-10 records hold (3, 32, 32) images, got {image_u8.shape}")
    return bytes([label]) + image_u8.tobytes()


# -- synthetic shapes ----------------------------------------------------------------
def _shape_mask(kind: int, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dx * dx + dy * dy <= r * r
    if kind == 1:
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if kind == 2:
        top, bottom = cy - r, cy + 0.75 * r
        frac = (yy - top) / (bottom - top)
        return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * r)
    arm = 0.3 * r
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def generate_synthetic(classes: int = 4, per_class: int = 100, size: int = 16, seed: int = 0,
                       split: str = "train", noise: float = 0.06, contrast: float = 0.45) -> Dataset:
    """Deterministic coloured-shape images, one class per shape identity.

    Each image holds a circle, square, triangle or cross with random centre,
    scale, fill colour and background colour, plus Gaussian pixel noise. Fill
    and background are redrawn until their mean absolute channel difference
    reaches ``contrast``.
    Edges are anti-aliased by 4x supersampling and pixels are quantised to
    multiples of 1/255 so the data survives 8-bit storage unchanged.
    """
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise ConfigError(f"classes must be in [1, {len(SHAPE_CLASSES)}], got {classes}")
    if per_class < 1 or size < 4:
        raise ConfigError("per_class must be >= 1 and size >= 4")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    ss = 4
    grid = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((len(labels), 3, size, size), dtype=np.float32)
    for n, lab in enumerate(labels):
        r = rng.uniform(0.25, 0.4) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        bg = rng.uniform(0.0, 1.0, size=3)
        fg = rng.uniform(0.0, 1.0, size=3)
        while np.abs(fg - bg).mean() < contrast:
            fg = rng.uniform(0.0, 1.0, size=3)
        cover = _shape_mask(int(lab), yy, xx, cy, cx, r).astype(np.float64)
        cover = cover.reshape(size, ss, size, ss).mean(axis=(1, 3))
        img = bg[:, None, None] * (1 - cover) + fg[:, None, None] * cover
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[n] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images, labels, SHAPE_CLASSES[:classes], split)


def synthetic_splits(per_class_train: int, per_class_test: int, size: int = 16, seed: int = 0,
                     classes: int = 4) -> Tuple[Dataset, Dataset]:
    """Independent train and test draws from the shapes generator."""
    train = generate_synthetic(classes, per_class_train, size, seed, "train")
    test = generate_synthetic(classes, per_class_test, size, seed + 7919, "test")
    return train, test


# -- PPM ----------------------------------------------------------------------------
def to_u8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) float image in [0, 1] -> (H, W, 3) uint8, clipping out-of-range values."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"expected a (C, H, W) image with C in (1, 3), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise FormatError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        warnings.warn("image values outside [0, 1] were clipped", RuntimeWarning, stacklevel=3)
        image = np.clip(image, 0.0, 1.0)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.round(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    rgb = to_u8(image)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def write_ppm(image: np.ndarray, path: PathLike) -> None:
    """Write a (C, H, W) image in [0, 1] as binary PPM (P6, maxval 255)."""
    Path(path).write_bytes(encode_ppm(image))


def write_rgb_ppm(rgb_u8: np.ndarray, path: PathLike) -> None:
    """Write an already-quantised (H, W, 3) uint8 buffer as P6."""
    h, w, _ = rgb_u8.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb_u8).tobytes())


def decode_ppm(raw: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos: pos + 1].isspace():
            pos += 1
        if raw[pos: pos + 1] == b"#":
            while pos < len(raw) and raw[pos: pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    payload = raw[pos: pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"PPM payload has {len(payload)} bytes, expected {w * h * 3}")
    rgb = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return rgb.transpose(2, 0, 1).astype(np.float32) / 255.0


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a P6 file into a (3, H, W) float32 image in [0, 1]."""
    return decode_ppm(Path(path).read_bytes())


def read_ppm_dir(path: PathLike) -> np.ndarray:
    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm files in {path}")
    return np.stack([read_ppm(p) for p in files])
