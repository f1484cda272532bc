"""Procedural 16x16 grayscale classification data.

Each class owns a smooth template: a field shared by all classes plus a
class-specific field scaled by ``contrast``, both Gaussian-filtered white
noise, rescaled to ``[0.2, 0.8]``. A sample is its class template shifted by an integer offset
in ``[-max_shift, max_shift]^2`` with zero fill, plus pixelwise Gaussian noise,
clipped to ``[0, 1]``. Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidSpec
from .rng import Stream

SIDE = 16


@dataclass(frozen=True)
class DataSpec:
    classes: int = 10
    train: int = 5000
    test: int = 1000
    side: int = SIDE
    smoothness: float = 2.0
    contrast: float = 1.0
    max_shift: int = 2
    pixel_noise: float = 0.05
    low: float = 0.2
    high: float = 0.8

    @classmethod
    def from_dict(cls, d: dict | None) -> "DataSpec":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.classes < 2:
            raise InvalidSpec("need at least two classes")
        if self.train < self.classes or self.test < self.classes:
            raise InvalidSpec("each split needs at least one sample per class")
        if not 0 <= self.low < self.high <= 1:
            raise InvalidSpec("template range must satisfy 0 <= low < high <= 1")
        if self.contrast <= 0:
            raise InvalidSpec("contrast must be positive")
        if self.max_shift < 0 or self.pixel_noise < 0 or self.smoothness <= 0:
            raise InvalidSpec("shift, noise and smoothness must be non-negative")


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, side, side] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str
    gen_seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.gen_seed)


class Splits(NamedTuple):
    train: Dataset
    test: Dataset


def _smooth_field(spec: DataSpec, stream: Stream) -> np.ndarray:
    f = gaussian_filter(stream.normal(0.0, 1.0, (spec.side, spec.side)), sigma=spec.smoothness, mode="wrap")
    return (f - f.mean()) / f.std()


def make_templates(spec: DataSpec, stream: Stream) -> np.ndarray:
    """Class templates: a shared field plus ``contrast`` times a class field.

    Lower contrast makes classes share more structure (a harder task).
    """
    base = _smooth_field(spec, stream.child("base"))
    out = np.empty((spec.classes, spec.side, spec.side), dtype=np.float64)
    for c in range(spec.classes):
        field = base + spec.contrast * _smooth_field(spec, stream.child(c))
        field = (field - field.min()) / (field.max() - field.min())
        out[c] = spec.low + (spec.high - spec.low) * field
    return out


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _sample_split(spec, templates, n, stream, split, seed) -> Dataset:
    labels = np.arange(n) % spec.classes
    labels = labels[stream.child("order").permutation(n)]
    shifts = stream.child("shift").integers(-spec.max_shift, spec.max_shift, size=(n, 2))
    noise = stream.child("noise").normal(0.0, spec.pixel_noise, (n, spec.side, spec.side))
    images = np.empty((n, 1, spec.side, spec.side), dtype=np.float32)
    for i in range(n):
        img = _shift(templates[labels[i]], int(shifts[i, 0]), int(shifts[i, 1])) + noise[i]
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), split, seed)


def gen_dataset(spec: DataSpec | dict | None = None, seed: int = 0) -> Splits:
    """Generate train and test splits sharing one set of class templates."""
    if not isinstance(spec, DataSpec):
        spec = DataSpec.from_dict(spec)
    spec.validate()
    root = Stream(seed).child("dataset")
    templates = make_templates(spec, root.child("templates"))
    train = _sample_split(spec, templates, spec.train, root.child("train"), "train", seed)
    test = _sample_split(spec, templates, spec.test, root.child("test"), "test", seed)
    return Splits(train, test)
