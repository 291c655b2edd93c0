"""Synthetic glyph-image classification datasets."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import ParameterError, make_rng

__all__ = ["GLYPHS", "LabeledDataset", "ShapeDatasetSpec", "generate_shape_dataset", "train_val_split"]

SPLITS = ("train", "validation")


@dataclass(eq=False)
class LabeledDataset:
    """Images in the unit domain with integer labels in ``[0, n_classes)``.

    ``images`` is a float32 ``(n, H, W, C)`` array so that the binary file
    format round-trips it without loss.
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 and not (self.images.size == 0 and self.labels.size == 0):
            raise ParameterError(f"images must be (n, H, W, C), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ParameterError("images and labels differ in length")
        if self.n_classes < 1:
            raise ParameterError("n_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ParameterError("label out of range")
        if self.split not in SPLITS:
            raise ParameterError(f"unknown split {self.split!r}")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.n_classes, self.split)

    def equals(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return False
        same_meta = (self.n_classes, self.split, len(self)) == (other.n_classes, other.split, len(other))
        if not same_meta:
            return False
        if len(self) == 0:
            return True
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ShapeDatasetSpec:
    image_size: int = 16
    n_classes: int = 4
    per_class_count: int = 100
    noise_std: float = 0.05
    channels: int = 3
    jitter: int = 2
    seed: int = 0
    fg_range: tuple = (0.8, 1.0)
    bg_range: tuple = (0.0, 0.15)
    glyph_scale: float = 0.3

    def __post_init__(self):
        if self.image_size < 8:
            raise ParameterError("image_size must be at least 8")
        if not 2 <= self.n_classes <= len(GLYPHS):
            raise ParameterError(f"n_classes must be in [2, {len(GLYPHS)}]")
        if self.per_class_count < 0 or self.noise_std < 0 or self.jitter < 0:
            raise ParameterError("counts, noise_std and jitter must be non-negative")
        if self.channels not in (1, 3):
            raise ParameterError("channels must be 1 or 3")
        if not 0.1 <= self.glyph_scale <= 0.45:
            raise ParameterError("glyph_scale must lie in [0.1, 0.45]")
        for lo, hi in (self.fg_range, self.bg_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ParameterError("colour ranges must satisfy 0 <= lo <= hi <= 1")


def _square(dy, dx, r):
    return (np.abs(dy) <= r) & (np.abs(dx) <= r)


def _disk(dy, dx, r):
    return dy ** 2 + dx ** 2 <= (r + 0.5) ** 2


def _cross(dy, dx, r):
    w = max(r / 3.0, 0.75)
    return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))


def _stripes(dy, dx, r):
    return _square(dy, dx, r) & ((np.floor(dy + r + 0.5).astype(int) // 2) % 2 == 0)


def _ring(dy, dx, r):
    d2 = dy ** 2 + dx ** 2
    return (d2 <= (r + 0.5) ** 2) & (d2 >= (r - 1.5) ** 2)


def _vstripes(dy, dx, r):
    return _stripes(dx, dy, r)


def _diagonal(dy, dx, r):
    return _square(dy, dx, r) & (np.abs(dy - dx) <= 1.0)


def _triangle(dy, dx, r):
    return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)


GLYPHS = {
    "square": _square,
    "disk": _disk,
    "cross": _cross,
    "triangle": _triangle,
    "ring": _ring,
    "stripes": _stripes,
    "vstripes": _vstripes,
    "diagonal": _diagonal,
}
_GLYPH_ORDER = tuple(GLYPHS)


def render_glyph(label, spec: ShapeDatasetSpec, rng) -> np.ndarray:
    s = spec.image_size
    r = spec.glyph_scale * s
    cy, cx = (s - 1) / 2.0 + rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    shape = GLYPHS[_GLYPH_ORDER[label]](yy - cy, xx - cx, r)
    fg = rng.uniform(*spec.fg_range, size=spec.channels)
    bg = rng.uniform(*spec.bg_range, size=spec.channels)
    img = np.where(shape[..., None], fg, bg)
    if spec.noise_std > 0:
        img = img + spec.noise_std * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shape_dataset(spec: ShapeDatasetSpec, split: str = "train") -> LabeledDataset:
    """Class-balanced glyph images, deterministic in ``(spec, split)``.

    Labels cycle ``0, 1, ..., K-1`` so every prefix of length ``m * K`` is
    balanced.  Each image draws from its own derived random stream.
    """
    if split not in SPLITS:
        raise ParameterError(f"unknown split {split!r}")
    k = spec.n_classes
    n = k * spec.per_class_count
    labels = np.arange(n, dtype=np.int64) % k
    images = np.empty((n, spec.image_size, spec.image_size, spec.channels), dtype=np.float32)
    for i in range(n):
        images[i] = render_glyph(int(labels[i]), spec, make_rng(spec.seed, f"datagen/{split}", i))
    return LabeledDataset(images, labels, k, split)


def train_val_split(spec: ShapeDatasetSpec, val_per_class: int):
    """Train split from ``spec`` plus a validation split with ``val_per_class`` per class."""
    train = generate_shape_dataset(spec, "train")
    val_spec = replace(spec, per_class_count=val_per_class)
    return train, generate_shape_dataset(val_spec, "validation")
