"""Integer executor for :class:`IntegerPlan`.

Every array the executor creates before ``Dequant`` is ``int64``; values are
additionally checked against the 32-bit signed accumulator range after each
primitive so an overflow aborts with the op index instead of wrapping.
"""

from __future__ import annotations

import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .. import kernels
from ..lowering.plan import IntegerPlan
from ..quantcore import ACC_MAX, ACC_MIN, levels


class ExecError(RuntimeError):
    pass


class AccumulatorOverflow(ExecError):
    def __init__(self, index: int, kind: str, value: int):
        super().__init__(f"accumulator overflow at op {index} ({kind}): |{value}| > {ACC_MAX}")
        self.index = index


@dataclass
class ExecReport:
    checksums: List[int]
    max_accumulator: int
    wall_time: float
    census: Dict[str, int]
    float_ops_before_dequant: int = 0
    per_op_max: List[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "checksums": list(self.checksums),
            "max_accumulator": int(self.max_accumulator),
            "wall_time_s": self.wall_time,
            "census": dict(self.census),
            "float_ops_before_dequant": self.float_ops_before_dequant,
        }


@dataclass
class ExecResult:
    eta: List[np.ndarray]
    real: List[np.ndarray]
    report: ExecReport
    values: Optional[Dict[int, np.ndarray]] = None


class _Tracer:
    """Counts primitives from the arrays actually touched at run time."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.float_ops = 0
        self.peak = 0

    def touch(self, *arrays):
        for a in arrays:
            if not np.issubdtype(np.asarray(a).dtype, np.integer):
                self.float_ops += np.size(a)

    def add(self, key: str, n: int):
        if n:
            self.counts[key] += int(n)


def _check(index: int, kind: str, *arrays) -> int:
    peak = 0
    for a in arrays:
        if a.size:
            lo, hi = int(a.min()), int(a.max())
            if hi > ACC_MAX or lo < ACC_MIN:
                raise AccumulatorOverflow(index, kind, max(hi, -lo))
            peak = max(peak, hi, -lo)
    return peak


def _chan(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.int64)[None, :, None, None]


def _shift_bias(d: np.ndarray) -> np.ndarray:
    return np.where(d > 0, np.left_shift(np.int64(1), np.maximum(d - 1, 0)), 0)


def exec_plan(
    p: IntegerPlan,
    eta_in: np.ndarray,
    keep_values: bool = False,
    trace: bool = False,
) -> ExecResult:
    """Run ``p`` on an integer input batch of shape ``(N, C, H, W)``.

    Returns the integer outputs feeding each ``Dequant``, the real outputs and
    an :class:`ExecReport`. With ``trace`` the census in the report is the
    dynamic primitive count of this run (otherwise it is left empty).
    """
    t0 = time.perf_counter()
    x = np.asarray(eta_in)
    if not np.issubdtype(x.dtype, np.integer):
        raise ExecError(f"plan input must be integer, got {x.dtype}")
    s0 = p.slots[0]
    if x.ndim != 4 or tuple(x.shape[1:]) != s0.shape:
        raise ExecError(f"input shape {x.shape} does not match plan input {s0.shape}")
    top = levels(s0.bits or 8)
    if x.size and (x.min() < 0 or x.max() > top):
        raise ExecError(f"input outside the {s0.bits}-bit range [0, {top}]")
    vals: Dict[int, np.ndarray] = {0: x.astype(np.int64)}
    tr = _Tracer()
    checksums, per_op_max = [], []
    eta_out: Dict[int, np.ndarray] = {}
    real_out: Dict[int, np.ndarray] = {}
    for i, op in enumerate(p.ops):
        a = op.attrs
        ins = [vals[j] for j in op.inputs]
        xin = ins[0]
        if op.kind != "Dequant":
            tr.touch(*ins)
        if op.kind == "IntConv":
            w = np.asarray(a["weight"], dtype=np.int64)
            out, cols = kernels.conv2d(xin, w, a["stride"], a["padding"])
            taps = cols.shape[-1]
            tr.add("mult.8", cols.shape[0] * cols.shape[1] * cols.shape[2] * taps * w.shape[0])
            tr.add("add.32", out.size * (taps - 1))
            peak = _check(i, op.kind, out)
        elif op.kind == "BnOffsetAdd":
            out = xin + _chan(a["offset"])
            tr.add("add.32", out.size)
            peak = _check(i, op.kind, xin, out)
        elif op.kind == "Requant":
            c, d = _chan(a["c"]), _chan(a["d"])
            t = xin * c
            if a.get("symmetric"):
                t = t + np.left_shift(np.int64(1), d + int(a["bits"]))
                shifted = np.right_shift(t, d + 1)
            else:
                t = t + _shift_bias(d)
                shifted = np.right_shift(t, d)
            peak = _check(i, op.kind, t)
            out = np.clip(shifted, int(a["lo"]), int(a["hi"]))
            tr.add("mult.32", xin.size)
            tr.add("add.32", xin.size)
            tr.add("shift.32", xin.size)
            tr.add("compare.32", 2 * xin.size)
        elif op.kind == "DyadicSkipAdd":
            x2 = ins[1]
            if x2.shape != xin.shape:
                raise ExecError(f"op {i} skip shapes {xin.shape} vs {x2.shape}")
            side2 = _chan(a["side"]) == 2
            scaled = np.where(side2, x2, xin)
            plain = np.where(side2, xin, x2)
            c, d = _chan(a["c"]), _chan(a["d"])
            t = scaled * c + _shift_bias(d)
            out = plain + np.right_shift(t, d)
            peak = _check(i, op.kind, t, out)
            tr.add("mult.32", out.size)
            tr.add("add.32", 2 * out.size)
            tr.add("shift.32", out.size)
        elif op.kind == "IntMaxPool":
            k = int(a["k"])
            out = kernels.maxpool(xin, k)
            tr.add("compare.32", out.size * (k * k - 1))
            peak = _check(i, op.kind, out)
        elif op.kind == "IntUpsample":
            out = kernels.upsample_nearest(xin, int(a["factor"]))
            peak = _check(i, op.kind, out)
        elif op.kind == "Dequant":
            eta_out[op.output] = xin
            alpha = np.asarray(a["alpha"], dtype=np.float64)
            if a.get("symmetric"):
                num = 2 * xin - levels(int(a["bits"]))
            else:
                num = xin
            real = (num * alpha[None, :, None, None] if xin.ndim == 4 else num * alpha)
            out = real.reshape(len(real), -1)
            real_out[op.output] = out
            peak = 0
        else:
            raise ExecError(f"op {i}: unknown kind {op.kind!r}")
        if op.kind != "Dequant" and not np.issubdtype(out.dtype, np.integer):
            raise ExecError(f"op {i} ({op.kind}) produced {out.dtype}")
        vals[op.output] = out
        tr.peak = max(tr.peak, peak)
        per_op_max.append(int(peak))
        checksums.append(zlib.crc32(np.ascontiguousarray(out).tobytes()))
    report = ExecReport(
        checksums=checksums,
        max_accumulator=tr.peak,
        wall_time=time.perf_counter() - t0,
        census=dict(tr.counts) if trace else {},
        float_ops_before_dequant=tr.float_ops,
        per_op_max=per_op_max,
    )
    return ExecResult(
        eta=[eta_out.get(o, vals[o]) for o in p.outputs],
        real=[real_out.get(o) for o in p.outputs],
        report=report,
        values=vals if keep_values else None,
    )

