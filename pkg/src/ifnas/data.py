"""Desk-scale labelled data.

The built-in task labels Gaussian inputs with a randomly drawn deep ReLU
"teacher" network, so that deeper students fit it better than shallow ones.
Small external image sets can be loaded from ``.npz`` files holding ``x``
with shape (n, C, H, W) and integer labels ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    batch_size: int = 32

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"bad dataset shapes x={self.x.shape} y={self.y.shape}")
        if not 0 < self.batch_size <= len(self.y):
            raise ValueError(f"batch_size {self.batch_size} not in 1..{len(self.y)}")

    @property
    def iterations_per_epoch(self) -> int:
        return len(self.y) // self.batch_size

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    def batch(self, seed: int, iteration: int):
        """Mini-batch for a global iteration index; a fresh permutation every epoch."""
        ipe = self.iterations_per_epoch
        epoch, k = divmod(iteration, ipe)
        perm = np.random.default_rng([seed, epoch]).permutation(len(self.y))
        idx = perm[k * self.batch_size:(k + 1) * self.batch_size]
        return self.x[idx], self.y[idx]


def teacher_labels(x: np.ndarray, num_classes: int, depth: int, width: int,
                   rng: np.random.Generator) -> np.ndarray:
    h = x.reshape(len(x), -1)
    for _ in range(depth):
        w = rng.normal(0, np.sqrt(2.0 / h.shape[1]), (h.shape[1], width))
        b = rng.normal(0, 0.1, width)
        h = np.maximum(h @ w + b, 0.0)
        h = (h - h.mean(axis=0)) / (h.std(axis=0) + 1e-12)
    v = rng.normal(0, 1.0, (h.shape[1], num_classes))
    return np.argmax(h @ v, axis=1)


def make_synthetic(n: int = 512, num_classes: int = 4, channels: int = 8, spatial: int = 1,
                   depth: int = 6, width: int = 32, seed: int = 0,
                   batch_size: int = 32) -> Dataset:
    rng = np.random.default_rng([seed, 7919])
    x = rng.normal(0, 1.0, (n, channels, spatial, spatial))
    y = teacher_labels(x, num_classes, depth, width, rng)
    return Dataset(x, y, batch_size)


def load_npz(path: str | Path, batch_size: int = 32) -> Dataset:
    with np.load(path) as z:
        if "x" not in z or "y" not in z:
            raise ValueError(f"{path}: expected arrays 'x' and 'y'")
        return Dataset(z["x"], z["y"], batch_size)
