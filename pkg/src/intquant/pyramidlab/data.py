"""Synthetic single-object images whose object size picks a pyramid level."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..traingraph.train import Dataset

SHAPES = ("square", "circle", "triangle")
LEVELS = 3


class MixtureError(ValueError):
    pass


@dataclass(frozen=True)
class PyramidSample:
    image: np.ndarray
    label: int
    scale_level: int
    size: float


@dataclass
class PyramidSet:
    """Images ``(N, 1, S, S)``, labels, assigned levels and object sizes in pixels."""

    x: np.ndarray
    y: np.ndarray
    level: np.ndarray
    size: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> PyramidSample:
        return PyramidSample(self.x[i, 0], int(self.y[i]), int(self.level[i]), float(self.size[i]))

    def as_dataset(self) -> Dataset:
        return Dataset(self.x, self.y, self.level)

    def tobytes(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.x, self.y, self.level, self.size))


def level_centers(gap: float = 2.0, base: float = 6.0, levels: int = LEVELS):
    """Typical object size per level; neighbours differ by the factor ``gap``."""
    return base * gap ** np.arange(levels)


def size_thresholds(gap: float = 2.0, base: float = 6.0, levels: int = LEVELS):
    """Sizes separating the levels (geometric midpoints of the centers)."""
    return level_centers(gap, base, levels)[:-1] * np.sqrt(gap)


def assign_level(size, gap: float = 2.0, base: float = 6.0) -> np.ndarray:
    return np.searchsorted(size_thresholds(gap, base), np.asarray(size), side="right")


def _check_mixture(mixture) -> np.ndarray:
    m = np.asarray(mixture, dtype=np.float64)
    if m.shape != (LEVELS,) or np.any(m < 0) or not np.isclose(m.sum(), 1.0, atol=1e-9):
        raise MixtureError(f"mixture must be {LEVELS} non-negative weights summing to 1, got {list(mixture)}")
    return m / m.sum()


def _mask(shape: str, size: float, cy: float, cx: float, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    r = size / 2.0
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    # upright isosceles triangle with base and height equal to size
    t = (dy + r) / size
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)


def gen_dataset(
    seed: int,
    n: int,
    mixture: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    noise: float = 0.1,
    gap: float = 2.0,
    side: int = 32,
    base: float = 6.0,
) -> PyramidSet:
    """``n`` images, each holding one filled shape on a dark background.

    The level is drawn from ``mixture``; the size is then log-uniform inside
    that level's band, so the size thresholds recover the level exactly.
    Intensity is uniform in [0.6, 1] and Gaussian noise of std ``noise`` is
    added. Output is a pure function of the arguments.
    """
    m = _check_mixture(mixture)
    if n < 0 or noise < 0 or gap <= 1.0:
        raise ValueError("need n >= 0, noise >= 0 and gap > 1")
    rng = np.random.default_rng(seed)
    level = rng.choice(LEVELS, size=n, p=m).astype(np.int64)
    label = rng.integers(0, len(SHAPES), size=n).astype(np.int64)
    size = level_centers(gap, base)[level] * gap ** rng.uniform(-0.5, 0.5, n)
    size = np.minimum(size, side - 2.0)
    x = np.zeros((n, 1, side, side))
    for i in range(n):
        half = size[i] / 2.0
        cy, cx = rng.uniform(half + 0.5, side - half - 0.5, 2)
        x[i, 0][_mask(SHAPES[label[i]], size[i], cy, cx, side)] = rng.uniform(0.6, 1.0)
    x += noise * rng.standard_normal(x.shape)
    return PyramidSet(x, label, assign_level(size, gap, base), size)
