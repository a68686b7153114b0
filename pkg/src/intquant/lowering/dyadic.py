"""Dyadic-rational approximation of positive ratios.

All arithmetic is exact (:class:`fractions.Fraction`); float inputs are exact
binary fractions, so no rounding happens before the search.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from ..quantcore import ACC_MAX

D_MAX_DEFAULT = 16
MODES = ("aqd", "fqn")


class DyadicError(ValueError):
    pass


@dataclass(frozen=True)
class DyadicRational:
    """The value ``c / 2**d``."""

    c: int
    d: int

    def __post_init__(self):
        if self.c < 0 or self.d < 0:
            raise DyadicError(f"dyadic ({self.c}, {self.d}) must be non-negative")

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.c, 1 << self.d)

    @property
    def value(self) -> float:
        return self.c / (1 << self.d)


def _as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(float(v))


def dyadic_approx(
    m,
    n=1,
    d_max: int = D_MAX_DEFAULT,
    c_max: Optional[int] = None,
    mode: str = "aqd",
) -> Tuple[DyadicRational, float]:
    """Best ``c / 2**d`` approximation of ``m / n``.

    ``aqd`` searches every ``d`` in ``[0, d_max]`` and every ``0 <= c <= c_max``.
    ``fqn`` admits only powers of two ``2**k`` with ``|k| <= d_max``; positive
    exponents are encoded as ``(2**k, 0)``. Ties go to the smallest ``d``, then
    the smallest ``c``. Returns the pair and its absolute error.
    """
    r = _as_fraction(m) / _as_fraction(n)
    if r <= 0:
        raise DyadicError(f"ratio must be positive, got {float(r)}")
    if mode not in MODES:
        raise DyadicError(f"unknown mode {mode!r}")
    if c_max is None:
        c_max = ACC_MAX
    if c_max < 1:
        raise DyadicError(f"no feasible numerator under bound c_max={c_max}")
    best = None
    for cand in _candidates(r, d_max, c_max, mode):
        err = abs(r - cand.fraction)
        key = (err, cand.d, cand.c)
        if best is None or key < best[0]:
            best = (key, cand)
    if best is None:
        raise DyadicError(f"no feasible (c, d) for ratio {float(r)} under c_max={c_max}")
    return best[1], float(best[0][0])


def _candidates(r: Fraction, d_max: int, c_max: int, mode: str):
    if mode == "fqn":
        for k in range(d_max, -1, -1):
            if (1 << k) <= c_max:
                yield DyadicRational(1 << k, 0)
        for d in range(1, d_max + 1):
            yield DyadicRational(1, d)
        return
    for d in range(d_max + 1):
        scaled = r * (1 << d)
        lo = min(scaled.numerator // scaled.denominator, c_max)
        yield DyadicRational(lo, d)
        if lo + 1 <= c_max:
            yield DyadicRational(lo + 1, d)


def shift_round(t, d):
    """``floor(t / 2**d + 1/2)`` for integer arrays, with ``d`` broadcastable."""
    t = np.asarray(t, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    bias = np.where(d > 0, np.left_shift(1, np.maximum(d - 1, 0)), 0)
    return np.right_shift(t + bias, d)
