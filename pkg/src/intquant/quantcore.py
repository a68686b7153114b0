"""Quantized values, learnable-interval quantizers and their STE gradients.

A quantized tensor is an integer array ``eta`` times a positive real scale
``alpha`` (per tensor or per channel). Activations live on the unsigned grid
``{0, ..., 2**b - 1} * nu / (2**b - 1)``; weights on the symmetric grid
``-nu + k * 2 * nu / (2**b - 1)``.

Rounding is half-away-from-zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

ALLOWED_BITS = (2, 3, 4, 8)
ACC_MIN = -(2**31)
ACC_MAX = 2**31 - 1

UNSIGNED = "unsigned-activation"
ACCUMULATOR = "signed-accumulator"

ArrayLike = Union[np.ndarray, float, int]


class QuantError(ValueError):
    """Raised for malformed quantizer inputs or invalid quantized tensors."""


def levels(bits: int) -> int:
    """Number of grid steps, ``2**bits - 1``."""
    return (1 << bits) - 1


def round_half_away(x: ArrayLike) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.isfinite(x))
        raise QuantError(f"{what}: non-finite value at flat index {int(bad[0])}")


def _check_bits(bits: int) -> None:
    if bits not in ALLOWED_BITS:
        raise QuantError(f"bitwidth {bits} not in {ALLOWED_BITS}")


@dataclass(frozen=True)
class ActQuantizer:
    """Unsigned quantizer on ``[0, nu]``."""

    nu: float
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise QuantError(f"activation interval must be positive, got {self.nu}")

    @property
    def step(self) -> float:
        return self.nu / levels(self.bits)


@dataclass(frozen=True)
class WtQuantizer:
    """Symmetric quantizer on ``[-nu, nu]``."""

    nu: float
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise QuantError(f"weight interval must be positive, got {self.nu}")

    @property
    def step(self) -> float:
        return 2.0 * self.nu / levels(self.bits)


@dataclass(frozen=True)
class QuantTensor:
    """Integer values with scale metadata: real value = eta * alpha.

    ``alpha`` is a scalar or a length-C vector broadcast along axis 1 (or axis
    0 for 1-D/2-D channel-major arrays).
    """

    eta: np.ndarray
    alpha: np.ndarray
    bits: int
    domain: str = UNSIGNED

    def __post_init__(self):
        eta = np.asarray(self.eta)
        if not np.issubdtype(eta.dtype, np.integer):
            raise QuantError(f"eta must be an integer array, got {eta.dtype}")
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "alpha", alpha)
        if self.domain not in (UNSIGNED, ACCUMULATOR):
            raise QuantError(f"unknown domain {self.domain!r}")
        _check_bits(self.bits)
        if not np.all(alpha > 0):
            raise QuantError("alpha must be positive elementwise")
        lo, hi = self.range
        if eta.size and (eta.min() < lo or eta.max() > hi):
            raise QuantError(f"eta outside {self.domain} range [{lo}, {hi}]")
        if alpha.size > 1 and alpha.size != self.channels:
            raise QuantError(
                f"per-channel alpha has {alpha.size} entries for {self.channels} channels"
            )

    @property
    def range(self) -> Tuple[int, int]:
        if self.domain == UNSIGNED:
            return 0, levels(self.bits)
        return ACC_MIN, ACC_MAX

    @property
    def channels(self) -> int:
        if self.eta.ndim >= 2:
            return self.eta.shape[1] if self.eta.ndim == 4 else self.eta.shape[0]
        return self.eta.shape[0] if self.eta.ndim == 1 else 1


def _broadcast_alpha(alpha: np.ndarray, eta: np.ndarray) -> np.ndarray:
    if alpha.size == 1:
        return alpha.reshape(())
    if eta.ndim == 4:
        return alpha.reshape(1, -1, 1, 1)
    shape = [1] * eta.ndim
    shape[0] = -1
    return alpha.reshape(shape)


def dequantize(t: QuantTensor) -> np.ndarray:
    """Real values ``eta * alpha`` with per-channel broadcast."""
    return t.eta.astype(np.float64) * _broadcast_alpha(t.alpha, t.eta)


def quantize_activation(x: ArrayLike, q: ActQuantizer) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(eta, xbar)`` for the unsigned grid of ``q``."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "quantize_activation")
    m = levels(q.bits)
    # multiply before dividing: exact whenever nu = m * 2**k and x is dyadic
    eta = round_half_away(np.clip(x, 0.0, q.nu) * m / q.nu).astype(np.int64)
    return eta, eta * (q.nu / m)


def quantize_weight(w: ArrayLike, q: WtQuantizer) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(eta, wbar)`` for the symmetric grid of ``q``; eta in [0, 2**b - 1]."""
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w, "quantize_weight")
    m = levels(q.bits)
    eta = round_half_away((np.clip(w, -q.nu, q.nu) * m / q.nu + m) / 2.0).astype(np.int64)
    return eta, (2 * eta - m) * (q.nu / m)


def grad_scale(n: int, bits: int) -> float:
    """LSQ-style interval gradient scale ``1 / sqrt(n * (2**b - 1))``."""
    return 1.0 / np.sqrt(max(n, 1) * levels(bits))


def ste_grad_activation(
    x: ArrayLike,
    upstream: ArrayLike,
    q: ActQuantizer,
    xbar: Optional[np.ndarray] = None,
    scale: Optional[float] = None,
) -> Tuple[np.ndarray, float]:
    """Straight-through gradients of the activation quantizer.

    Returns ``(dL/dx, dL/dnu)``; ``dL/dnu`` is summed over all elements and
    multiplied by ``scale`` when given.
    """
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if xbar is None:
        _, xbar = quantize_activation(x, q)
    inside = (x > 0) & (x < q.nu)
    dx = np.where(inside, up, 0.0)
    dnu_local = np.where(inside, (xbar - x) / q.nu, np.where(x >= q.nu, 1.0, 0.0))
    dnu = float(np.sum(up * dnu_local))
    if scale is not None:
        dnu *= scale
    return dx, dnu


def ste_grad_weight(
    w: ArrayLike,
    upstream: ArrayLike,
    q: WtQuantizer,
    wbar: Optional[np.ndarray] = None,
    scale: Optional[float] = None,
) -> Tuple[np.ndarray, float]:
    """Straight-through gradients of the weight quantizer, ``(dL/dw, dL/dnu)``."""
    w = np.asarray(w, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if wbar is None:
        _, wbar = quantize_weight(w, q)
    inside = (w > -q.nu) & (w < q.nu)
    dw = np.where(inside, up, 0.0)
    side = np.where(w >= q.nu, 1.0, -1.0)
    dnu_local = np.where(inside, (wbar - w) / q.nu, side)
    dnu = float(np.sum(up * dnu_local))
    if scale is not None:
        dnu *= scale
    return dw, dnu


# Surrogates with frozen rounding residuals. Their exact derivatives are the STE
# gradients above, which makes them the reference for finite-difference checks.


def activation_residual(x: ArrayLike, q: ActQuantizer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = np.clip(x, 0.0, q.nu) * levels(q.bits) / q.nu
    return round_half_away(u) - u


def weight_residual(w: ArrayLike, q: WtQuantizer) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    m = levels(q.bits)
    u = (np.clip(w, -q.nu, q.nu) * m / q.nu + m) / 2.0
    return round_half_away(u) - u


def activation_surrogate(x: ArrayLike, nu: float, bits: int, residual: np.ndarray) -> np.ndarray:
    m = levels(bits)
    x = np.asarray(x, dtype=np.float64)
    return (np.clip(x, 0.0, nu) * m / nu + residual) * (nu / m)


def weight_surrogate(w: ArrayLike, nu: float, bits: int, residual: np.ndarray) -> np.ndarray:
    m = levels(bits)
    w = np.asarray(w, dtype=np.float64)
    u = (np.clip(w, -nu, nu) * m / nu + m) / 2.0
    return (2 * (u + residual) - m) * (nu / m)


def activation_knot_distance(x: ArrayLike, q: ActQuantizer) -> np.ndarray:
    """Distance in x-units to the nearest rounding knot or clip boundary."""
    x = np.asarray(x, dtype=np.float64)
    m = levels(q.bits)
    u = x / q.nu * m
    to_half = np.abs(u - np.floor(u) - 0.5) * q.nu / m
    return np.minimum(to_half, np.minimum(np.abs(x), np.abs(x - q.nu)))


def weight_knot_distance(w: ArrayLike, q: WtQuantizer) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    m = levels(q.bits)
    u = (w / q.nu + 1.0) / 2.0 * m
    to_half = np.abs(u - np.floor(u) - 0.5) * 2.0 * q.nu / m
    return np.minimum(to_half, np.minimum(np.abs(w + q.nu), np.abs(w - q.nu)))
