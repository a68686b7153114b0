"""Lower a trained fake-quant :class:`ModelGraph` to an :class:`IntegerPlan`.

Scales are tracked as exact fractions of the float parameters, so a ratio
that is dyadic in the checkpoint stays exactly dyadic through the search.
The only rounding of a non-dyadic quantity is ``sqrt(var + eps)``, taken in
float64 exactly as the training graph does.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..quantcore import (
    ACC_MAX,
    ACCUMULATOR,
    UNSIGNED,
    ActQuantizer,
    WtQuantizer,
    levels,
    quantize_activation,
    quantize_weight,
)
from ..traingraph.graph import GAMMA_MIN, ModelGraph, infer_shapes
from .dyadic import D_MAX_DEFAULT, DyadicError, dyadic_approx
from .plan import REAL, VERSION, IntegerPlan, PlanOp, Slot, input_bounds, op_bounds

C_BUDGET = ACC_MAX // 2


class LoweringError(ValueError):
    pass


def _frac(v) -> Fraction:
    return Fraction(float(v))


def _half_away(x: Fraction) -> int:
    q = (abs(x.numerator) * 2 + x.denominator) // (2 * x.denominator)
    return q if x >= 0 else -q


def c_bound(max_abs: int) -> int:
    """Largest numerator whose product with any ``|eta| <= max_abs`` stays within budget."""
    return C_BUDGET // max(1, int(max_abs))


def lower_conv(w: np.ndarray, nu_w: float, bits: int, alpha_x, in_max: Optional[int] = None):
    """Mapped integer weights ``2*eta_w - (2**b - 1)`` and ``alpha_conv = alpha_x * nu_w / (2**b - 1)``.

    ``in_max`` is the largest input integer (defaults to an 8-bit input); a
    kernel whose worst case cannot fit 32 bits is rejected.
    """
    m = levels(bits)
    eta, _ = quantize_weight(w, WtQuantizer(float(nu_w), bits))
    mapped = 2 * eta - m
    in_max = 255 if in_max is None else int(in_max)
    volume = int(np.prod(w.shape[1:]))
    if volume * m * in_max > ACC_MAX:
        raise LoweringError(
            f"accumulator overflow risk: kernel volume {volume} x {m} x {in_max} exceeds {ACC_MAX}"
        )
    alpha = _frac(alpha_x) if not isinstance(alpha_x, Fraction) else alpha_x
    return mapped.astype(np.int64), alpha * _frac(nu_w) / m


def lower_bn(alpha_conv, gamma, beta, mean, var, eps: float, gamma_min: float = GAMMA_MIN):
    """Integer offsets ``round(s)`` and output scales ``alpha_z`` per channel.

    ``s = (beta * sqrt(var + eps) / gamma - mean) / alpha_conv``. Returns
    ``(offset, alpha_z, s)`` with ``alpha_z`` and ``s`` as lists of fractions.
    """
    gamma, beta = np.asarray(gamma, float), np.asarray(beta, float)
    mean, var = np.asarray(mean, float), np.asarray(var, float)
    if np.any(gamma < gamma_min):
        bad = int(np.flatnonzero(gamma < gamma_min)[0])
        raise LoweringError(f"BN gamma {gamma[bad]} below clamp {gamma_min} at channel {bad}")
    if np.any(var < 0):
        raise LoweringError("negative BN running variance")
    n = gamma.shape[0]
    if isinstance(alpha_conv, (list, tuple)):
        alphas = [a if isinstance(a, Fraction) else _frac(a) for a in alpha_conv]
    else:
        a = alpha_conv if isinstance(alpha_conv, Fraction) else _frac(alpha_conv)
        alphas = [a] * n
    sigma = np.sqrt(var + eps)
    offsets, alpha_z, s_all = [], [], []
    for ch in range(n):
        sg, g = _frac(sigma[ch]), _frac(gamma[ch])
        s = (_frac(beta[ch]) * sg / g - _frac(mean[ch])) / alphas[ch]
        offsets.append(_half_away(s))
        alpha_z.append(alphas[ch] * g / sg)
        s_all.append(s)
    return np.array(offsets, dtype=np.int64), alpha_z, s_all


def build_requant(alpha_in: Sequence, nu: float, bits: int, d_max: int = D_MAX_DEFAULT,
                  in_max: int = 1, symmetric: bool = False):
    """Per-channel ``(c, d)`` for the ratio ``alpha_in * (2**b - 1) / nu``.

    Returns ``(c, d, errors)``; execution semantics are documented in
    :mod:`intquant.lowering.plan`.
    """
    m = levels(bits)
    nu_f = _frac(nu)
    cs, ds, errs = [], [], []
    for a in alpha_in:
        a = a if isinstance(a, Fraction) else _frac(a)
        if a <= 0:
            raise LoweringError(f"requant input scale must be positive, got {float(a)}")
        try:
            dr, err = dyadic_approx(a * m, nu_f, d_max, c_bound(in_max))
        except DyadicError as e:
            raise LoweringError(str(e)) from e
        cs.append(dr.c)
        ds.append(dr.d)
        errs.append(err)
    return np.array(cs, dtype=np.int64), np.array(ds, dtype=np.int64), errs


def lower_skip(alpha1: Sequence, alpha2: Sequence, d_max: int = D_MAX_DEFAULT, mode: str = "aqd",
               max1: int = 1, max2: int = 1) -> dict:
    """Per-channel branch choice and dyadic factor for ``eta1*alpha1 + eta2*alpha2``.

    The input with the larger scale is the scaled side; the smaller scale
    survives. Returns a dict with ``c``, ``d``, ``side`` (1 or 2), ``alpha``
    (surviving scales, fractions) and ``errors``.
    """
    cs, ds, sides, alphas, errs = [], [], [], [], []
    for a1, a2 in zip(alpha1, alpha2):
        a1 = a1 if isinstance(a1, Fraction) else _frac(a1)
        a2 = a2 if isinstance(a2, Fraction) else _frac(a2)
        if a1 <= 0 or a2 <= 0:
            raise LoweringError("skip scales must be positive")
        if a2 >= a1:
            side, big, small, bound = 2, a2, a1, max2
        else:
            side, big, small, bound = 1, a1, a2, max1
        try:
            dr, err = dyadic_approx(big, small, d_max, c_bound(bound), mode)
        except DyadicError as e:
            raise LoweringError(str(e)) from e
        cs.append(dr.c)
        ds.append(dr.d)
        sides.append(side)
        alphas.append(small)
        errs.append(err)
    return {
        "c": np.array(cs, dtype=np.int64),
        "d": np.array(ds, dtype=np.int64),
        "side": np.array(sides, dtype=np.int64),
        "alpha": alphas,
        "errors": errs,
    }


def quantize_input(p: IntegerPlan, x: np.ndarray) -> np.ndarray:
    """8-bit input integers for a batch of raw images (done before the plan runs)."""
    nu = float(p.meta["input"]["nu"])
    bits = int(p.meta["input"]["bits"])
    eta, _ = quantize_activation(x, ActQuantizer(nu, bits))
    return eta


class _Builder:
    def __init__(self, d_max: int, mode: str):
        self.d_max, self.mode = d_max, mode
        self.ops: List[PlanOp] = []
        self.slots: List[Slot] = []
        self.alpha: List[List[Fraction]] = []
        self.bounds: Dict[int, tuple] = {}
        self.errors = {"requant": [], "skip": []}

    def slot(self, shape, domain, alpha, bits=None, per_tensor=False) -> int:
        self.slots.append(Slot(shape, domain, np.array([float(a) for a in alpha]), bits, per_tensor))
        self.alpha.append(list(alpha))
        return len(self.slots) - 1

    def emit(self, kind, inputs, out, attrs, name) -> int:
        op = PlanOp(kind, inputs, out, attrs, name)
        if kind != "Dequant":
            new, peak, msgs = op_bounds(op, [self.bounds[j] for j in op.inputs])
            if msgs:
                raise LoweringError(f"{name}: {msgs[0]}")
            if peak > ACC_MAX:
                raise LoweringError(f"{name}: worst-case accumulator {peak} exceeds {ACC_MAX}")
            self.bounds[out] = new
        self.ops.append(op)
        return out

    def max_abs(self, s: int) -> int:
        lo, hi = self.bounds[s]
        return max(abs(v) for v in lo + hi)


def lower_model(g: ModelGraph, d_max: int = D_MAX_DEFAULT, mode: str = "aqd",
                level: Optional[int] = None) -> IntegerPlan:
    """Compile a qat graph into an integer plan.

    ``mode="fqn"`` restricts skip factors to powers of two. ``level`` fixes
    the active BatchNorm of multi-level nodes that carry no level of their own.
    """
    if g.mode != "qat":
        raise LoweringError("graph is not in qat mode; quantize it before lowering")
    if mode not in ("aqd", "fqn"):
        raise LoweringError(f"unknown lowering mode {mode!r}")
    shapes = infer_shapes(g)
    users = g.consumers()
    P = g.params
    b = _Builder(d_max, mode)
    val: Dict[int, int] = {}
    relu_pending: Dict[int, bool] = {}
    if len(g.nodes) < 2 or g.nodes[1].op != "input_quant" or users[0] != [1]:
        raise LoweringError("graph must start with a single input quantizer")

    for i, node in enumerate(g.nodes):
        a, op, name = node.attrs, node.op, node.name or f"node{i}"
        shape = shapes[i]
        if op == "input":
            continue
        if op == "input_quant":
            bits = a["bits"]
            alpha = [_frac(P[a["nu"]]) / levels(bits)] * shape[0]
            val[i] = b.slot(shape, UNSIGNED, alpha, bits, True)
            b.bounds[val[i]] = input_bounds(IntegerPlan((), b.slots, ()))
            relu_pending[i] = False
            continue
        src = node.inputs[0]
        s_in = val[src]
        in_slot = b.slots[s_in]
        if op == "act_quant":
            bits, nu = a["bits"], float(P[a["nu"]])
            c, d, errs = build_requant(b.alpha[s_in], nu, bits, d_max, b.max_abs(s_in))
            b.errors["requant"].extend(errs)
            out = b.slot(shape, UNSIGNED, [_frac(nu) / levels(bits)] * shape[0], bits, True)
            attrs = {"c": c, "d": d, "bits": bits, "lo": 0, "hi": levels(bits), "symmetric": False}
            val[i] = b.emit("Requant", [s_in], out, attrs, name)
            relu_pending[i] = False
        elif op in ("conv", "linear"):
            if relu_pending[src]:
                raise LoweringError(f"{name}: ReLU must be followed by a quantizer before {op}")
            if in_slot.domain != UNSIGNED or not in_slot.per_tensor:
                raise LoweringError(f"{name}: {op} input must be a per-tensor unsigned quantized value")
            w = P[a["weight"]]
            stride, padding = a.get("stride", 1), a.get("padding", 0)
            if op == "linear":
                if tuple(in_slot.shape[1:]) != (1, 1):
                    raise LoweringError(f"{name}: linear layers lower only on 1x1 spatial inputs")
                w = w.reshape(w.shape[0], w.shape[1], 1, 1)
            mapped, alpha_conv = lower_conv(w, float(P[a["nu"]]), a["bits"], b.alpha[s_in][0],
                                            b.max_abs(s_in))
            out = b.slot(shape, ACCUMULATOR, [alpha_conv] * shape[0], None, True)
            attrs = {"weight": mapped, "stride": stride, "padding": padding,
                     "w_bits": a["bits"], "in_bits": in_slot.bits}
            val[i] = b.emit("IntConv", [s_in], out, attrs, name)
            relu_pending[i] = False
        elif op in ("bn", "mlbn"):
            if relu_pending[src]:
                raise LoweringError(f"{name}: ReLU before normalization is not lowerable")
            if op == "mlbn" and a.get("level") is None and level is None and len(a["keys"]) > 1:
                raise LoweringError(f"{name}: multi-level BN without a fixed level; pass level=")
            key = g.bn_key(i, level)
            offset, alpha_z, _ = lower_bn(
                b.alpha[s_in], P[key + ".gamma"], P[key + ".beta"],
                g.state[key + ".mean"], g.state[key + ".var"], a["eps"],
            )
            out = b.slot(shape, ACCUMULATOR, alpha_z)
            val[i] = b.emit("BnOffsetAdd", [s_in], out, {"offset": offset, "bn_key": key}, name)
            relu_pending[i] = False
        elif op == "relu":
            val[i] = s_in
            relu_pending[i] = in_slot.domain != UNSIGNED
        elif op in ("maxpool", "upsample"):
            kind = "IntMaxPool" if op == "maxpool" else "IntUpsample"
            out = b.slot(shape, in_slot.domain, b.alpha[s_in], in_slot.bits, in_slot.per_tensor)
            attrs = {"k": a["k"]} if op == "maxpool" else {"factor": a["factor"]}
            val[i] = b.emit(kind, [s_in], out, attrs, name)
            relu_pending[i] = relu_pending[src]
        elif op == "add":
            s2 = val[node.inputs[1]]
            if relu_pending[src] or relu_pending[node.inputs[1]]:
                raise LoweringError(f"{name}: ReLU feeding a skip add must be quantized first")
            sk = lower_skip(b.alpha[s_in], b.alpha[s2], d_max, mode, b.max_abs(s_in), b.max_abs(s2))
            b.errors["skip"].extend(sk["errors"])
            out = b.slot(shape, ACCUMULATOR, sk["alpha"])
            attrs = {"c": sk["c"], "d": sk["d"], "side": sk["side"]}
            val[i] = b.emit("DyadicSkipAdd", [s_in, s2], out, attrs, name)
            relu_pending[i] = False
        elif op == "output":
            if relu_pending[src]:
                raise LoweringError(f"{name}: ReLU feeding the symmetric output quantizer")
            bits, nu = a["bits"], float(P[a["nu"]])
            c, d, errs = build_requant(b.alpha[s_in], nu, bits, d_max, b.max_abs(s_in), True)
            b.errors["requant"].extend(errs)
            q = b.slot(in_slot.shape, UNSIGNED, [_frac(nu) / levels(bits)] * in_slot.shape[0], bits, True)
            attrs = {"c": c, "d": d, "bits": bits, "lo": 0, "hi": levels(bits), "symmetric": True}
            b.emit("Requant", [s_in], q, attrs, name + ".requant")
            out = b.slot(shape, REAL, [_frac(nu) / levels(bits)] * in_slot.shape[0])
            attrs = {"alpha": np.full(in_slot.shape[0], nu / levels(bits)), "bits": bits, "symmetric": True}
            val[i] = b.emit("Dequant", [q], out, attrs, name)
            relu_pending[i] = False
        else:
            raise LoweringError(f"{name}: op {op!r} has no integer lowering")

    outputs = []
    for o in g.outputs:
        if g.nodes[o].op != "output":
            raise LoweringError(f"graph output {g.nodes[o].name!r} is not an output quantizer")
        outputs.append(val[o])
    meta = {
        "version": VERSION,
        "source_hash": g.digest(),
        "graph": g.meta.get("name", ""),
        "d_max": d_max,
        "mode": mode,
        "level": level,
        "input": {"nu": float(P[g.nodes[1].attrs["nu"]]), "bits": g.nodes[1].attrs["bits"]},
        "bits": {n.name: n.attrs["bits"] for n in g.nodes if "bits" in n.attrs},
        "output_names": [g.nodes[o].name for o in g.outputs],
        "max_requant_error": max(b.errors["requant"], default=0.0),
        "max_skip_error": max(b.errors["skip"], default=0.0),
    }
    return IntegerPlan(b.ops, b.slots, outputs, meta)
