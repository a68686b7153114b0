"""Extended-precision reference simulation of an integer plan.

The simulation evaluates the plan's arithmetic in real-number form
(``floor(eta * c / 2**d + 1/2)`` by division, not shifts) in ``np.longdouble``.
On x86-64 that type has a 64-bit mantissa, so every intermediate of a plan
that passes :func:`validate_plan` is represented exactly. Where ``longdouble``
is plain double the simulation switches to exact Python integers.
"""

from __future__ import annotations

from typing import Dict

import numpy as np

from ..lowering.plan import IntegerPlan

EXTENDED = np.finfo(np.longdouble).nmant >= 63


def _conv(x, w, stride, padding):
    # tap-by-tap accumulation over strided views, independent of im2col
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out = out + np.einsum("nchw,oc->nohw", patch, w[:, :, i, j].astype(x.dtype))
    return out


class _Real:
    """Arithmetic on exact reals: longdouble where it is wide enough."""

    def __init__(self, extended: bool = EXTENDED):
        self.dt = np.longdouble if extended else object

    def cast(self, v):
        v = np.asarray(v)
        if self.dt is object:
            return np.asarray(np.frompyfunc(int, 1, 1)(v), dtype=object)
        return v.astype(np.longdouble)

    def chan(self, v):
        return self.cast(v)[None, :, None, None]

    def round_scaled(self, t, d, extra=0, halve=False):
        """``floor(t / 2**d + extra + 1/2)``, or ``floor((t / 2**d + extra) / 2)`` when ``halve``."""
        d = np.broadcast_to(np.asarray(d), t.shape)
        if self.dt is object:
            num = np.frompyfunc(lambda v, k: _exact(int(v), int(k), extra, halve), 2, 1)
            return np.asarray(num(t, d), dtype=object)
        q = t / np.ldexp(np.longdouble(1), d)
        if halve:
            return np.floor((q + np.longdouble(extra)) / np.longdouble(2))
        return np.floor(q + np.longdouble(extra) + np.longdouble(0.5))


def _exact(v: int, k: int, extra: int, halve: bool) -> int:
    from fractions import Fraction
    import math

    q = Fraction(v, 1 << k) + extra
    return math.floor(q / 2) if halve else math.floor(q + Fraction(1, 2))


def simulate_plan(p: IntegerPlan, eta_in: np.ndarray, keep_values: bool = False, extended: bool = EXTENDED):
    """Evaluate ``p`` exactly. Returns ``(eta_outputs, values)``.

    ``values`` maps slot index to the simulated ``int64`` array when
    ``keep_values`` is set.
    """
    R = _Real(extended)
    vals: Dict[int, np.ndarray] = {0: R.cast(eta_in)}
    for op in p.ops:
        a = op.attrs
        x = vals[op.inputs[0]]
        if op.kind == "IntConv":
            out = _conv(x, R.cast(a["weight"]), int(a["stride"]), int(a["padding"]))
        elif op.kind == "BnOffsetAdd":
            out = x + R.chan(a["offset"])
        elif op.kind == "Requant":
            t = x * R.chan(a["c"])
            d = np.asarray(a["d"])[None, :, None, None]
            if a.get("symmetric"):
                out = R.round_scaled(t, d, extra=2 ** int(a["bits"]), halve=True)
            else:
                out = R.round_scaled(t, d)
            lo, hi = int(a["lo"]), int(a["hi"])
            out = np.where(out < lo, R.cast(lo), np.where(out > hi, R.cast(hi), out))
        elif op.kind == "DyadicSkipAdd":
            y = vals[op.inputs[1]]
            side2 = np.asarray(a["side"])[None, :, None, None] == 2
            scaled, plain = np.where(side2, y, x), np.where(side2, x, y)
            d = np.asarray(a["d"])[None, :, None, None]
            out = plain + R.round_scaled(scaled * R.chan(a["c"]), d)
        elif op.kind == "IntMaxPool":
            k = int(a["k"])
            n, ch, h, w = x.shape
            out = x.reshape(n, ch, h // k, k, w // k, k).max(axis=(3, 5))
        elif op.kind == "IntUpsample":
            f = int(a["factor"])
            out = x.repeat(f, axis=2).repeat(f, axis=3)
        elif op.kind == "Dequant":
            out = x
        else:
            raise ValueError(f"unknown op kind {op.kind!r}")
        vals[op.output] = out
    by_out = {op.output: op for op in p.ops}
    eta = []
    for o in p.outputs:
        src = by_out[o].inputs[0] if o in by_out and by_out[o].kind == "Dequant" else o
        eta.append(_to_int(vals[src]))
    return eta, ({k: _to_int(v) for k, v in vals.items()} if keep_values else None)


def _to_int(v: np.ndarray) -> np.ndarray:
    if v.dtype == object:
        return np.array([int(t) for t in v.ravel()], dtype=np.int64).reshape(v.shape)
    r = v.astype(np.int64)
    if not np.array_equal(r.astype(v.dtype), v):
        raise ArithmeticError("reference value is not an exact integer")
    return r
