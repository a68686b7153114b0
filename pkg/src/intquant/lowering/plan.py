"""Integer execution plans: op records, static validation and the plan file.

A plan is a list of ops over numbered slots. Slot 0 holds the 8-bit input.
Every op except ``Dequant`` maps integer arrays to integer arrays, and every
constant an execution op reads is an integer array. Real-valued scales are
kept only as slot metadata.

Op kinds and their attributes:

``IntConv``        weight (O, C, kh, kw) in ``[-(2**b - 1), 2**b - 1]``, stride, padding
``BnOffsetAdd``    offset (C,)
``Requant``        c (C,), d (C,), bits, lo, hi, symmetric
``DyadicSkipAdd``  c (C,), d (C,), side (C,) in {1, 2}: the input that is scaled
``IntMaxPool``     k
``IntUpsample``    factor
``Dequant``        alpha (C,) real, bits, symmetric; terminal, output is real

``Requant`` computes ``clip((eta * c + 2**(d-1)) >> d, lo, hi)`` (no bias when
``d == 0``). The symmetric variant feeds an output quantizer on
``[-nu, nu]`` and computes ``(eta * c + 2**(bits + d)) >> (d + 1)`` instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..quantcore import ACC_MAX, ACC_MIN, ACCUMULATOR, UNSIGNED, levels
from ..traingraph.checkpoint import FormatVersionError

MAGIC = "INTQ-PLAN"
VERSION = 1

EXEC_KINDS = ("IntConv", "BnOffsetAdd", "Requant", "DyadicSkipAdd", "IntMaxPool", "IntUpsample")
KINDS = EXEC_KINDS + ("Dequant",)
REAL = "real"


class PlanError(ValueError):
    pass


def _freeze(v):
    if isinstance(v, np.ndarray):
        v = v.copy()
        v.flags.writeable = False
    return v


@dataclass(frozen=True)
class Slot:
    """Metadata of one plan value: per-sample shape, domain and scale."""

    shape: Tuple[int, ...]
    domain: str
    alpha: np.ndarray
    bits: Optional[int] = None
    per_tensor: bool = False

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "alpha", _freeze(np.asarray(self.alpha, dtype=np.float64)))


@dataclass(frozen=True)
class PlanOp:
    kind: str
    inputs: Tuple[int, ...]
    output: int
    attrs: Dict[str, object] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        object.__setattr__(self, "attrs", {k: _freeze(v) for k, v in self.attrs.items()})


@dataclass(frozen=True)
class IntegerPlan:
    ops: Tuple[PlanOp, ...]
    slots: Tuple[Slot, ...]
    outputs: Tuple[int, ...]
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "slots", tuple(self.slots))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @property
    def input_slot(self) -> Slot:
        return self.slots[0]

    def kinds(self) -> List[str]:
        return [op.kind for op in self.ops]


def empty_plan(shape=(1, 1, 1)) -> IntegerPlan:
    s = Slot(shape, UNSIGNED, np.ones(shape[0]) / 255.0, 8, True)
    return IntegerPlan((), (s,), (), {"version": VERSION})


# ---------------------------------------------------------------------------
# static validation


def _is_int_array(v) -> bool:
    return isinstance(v, np.ndarray) and np.issubdtype(v.dtype, np.integer)


_INT_ATTRS = {
    "IntConv": ("weight",),
    "BnOffsetAdd": ("offset",),
    "Requant": ("c", "d"),
    "DyadicSkipAdd": ("c", "d", "side"),
}


def _shift_bias(d: int) -> int:
    return 1 << (d - 1) if d > 0 else 0


def op_bounds(op: PlanOp, ins):
    """Bounds rule for one op.

    ``ins`` holds one ``(lo, hi)`` pair of per-channel Python-int lists per
    input. Returns ``(out_bounds, peak, messages)`` where ``peak`` is the
    largest magnitude any intermediate of the op can reach.
    """
    a = op.attrs
    lo, hi = ins[0]
    peak = 0
    msgs: List[str] = []
    if op.kind == "IntConv":
        if min(lo) < 0:
            msgs.append("convolution input is not unsigned")
        # with inputs in [0, hi] every partial sum lies between the sums of
        # the negative and of the positive products
        w = np.asarray(a["weight"], dtype=np.int64)
        top = np.asarray(hi, dtype=np.int64)[None, :, None, None]
        pos = (np.maximum(w, 0) * top).reshape(w.shape[0], -1).sum(axis=1)
        neg = (np.minimum(w, 0) * top).reshape(w.shape[0], -1).sum(axis=1)
        new = ([int(v) for v in neg], [int(v) for v in pos])
        peak = max([abs(v) for v in new[0] + new[1]] + [0])
    elif op.kind == "BnOffsetAdd":
        off = [int(v) for v in a["offset"]]
        new = ([l + o for l, o in zip(lo, off)], [h + o for h, o in zip(hi, off)])
        peak = max(abs(v) for v in new[0] + new[1] + lo + hi)
    elif op.kind == "Requant":
        cs, ds = [int(v) for v in a["c"]], [int(v) for v in a["d"]]
        sym = bool(a.get("symmetric", False))
        bits = int(a["bits"])
        for l, h, c, d in zip(lo, hi, cs, ds):
            bias = (1 << (bits + d)) if sym else _shift_bias(d)
            peak = max(peak, abs(l * c) + bias, abs(h * c) + bias)
        new = ([int(a["lo"])] * len(cs), [int(a["hi"])] * len(cs))
    elif op.kind == "DyadicSkipAdd":
        lo2, hi2 = ins[1]
        out_lo, out_hi = [], []
        for ch, (c, d, side) in enumerate(zip(a["c"], a["d"], a["side"])):
            c, d = int(c), int(d)
            one, two = (lo[ch], hi[ch]), (lo2[ch], hi2[ch])
            (sl, sh), (ul, uh) = (two, one) if int(side) == 2 else (one, two)
            bias = _shift_bias(d)
            peak = max(peak, abs(sl * c) + bias, abs(sh * c) + bias)
            out_lo.append(ul + ((sl * c + bias) >> d))
            out_hi.append(uh + ((sh * c + bias) >> d))
        peak = max([peak] + [abs(v) for v in out_lo + out_hi])
        new = (out_lo, out_hi)
    else:
        new = (list(lo), list(hi))
        if op.kind != "Dequant":
            peak = max(abs(v) for v in lo + hi)
    return new, peak, msgs


def input_bounds(p: IntegerPlan):
    c0 = p.slots[0].shape[0]
    return [0] * c0, [levels(p.slots[0].bits or 8)] * c0


def propagate_bounds(p: IntegerPlan, diag: Optional[list] = None):
    """Worst-case per-channel integer bounds of every slot.

    Returns ``(bounds, peaks)``: ``bounds[slot]`` is a ``(lo, hi)`` pair of
    per-channel Python-int lists and ``peaks[op]`` the largest magnitude any
    intermediate of that op can reach. Exact integer arithmetic throughout.
    """
    diag = [] if diag is None else diag
    bounds: Dict[int, Tuple[List[int], List[int]]] = {0: input_bounds(p)}
    peaks: List[int] = []
    for i, op in enumerate(p.ops):
        ins = [bounds.get(j) for j in op.inputs]
        if any(b is None for b in ins):
            diag.append(_diag(i, op, "reads a slot with no producer"))
            peaks.append(0)
            continue
        new, peak, msgs = op_bounds(op, ins)
        diag.extend(_diag(i, op, m) for m in msgs)
        peaks.append(peak)
        bounds[op.output] = new
    return bounds, peaks


def _diag(i, op, msg):
    return {"op_index": i, "kind": op.kind, "name": op.name, "message": msg}


def validate_plan(p: IntegerPlan) -> dict:
    """Static checks; returns a machine-readable report (never raises).

    Checks that only the terminal ``Dequant`` touches real values, that every
    execution constant is an integer array, that worst-case accumulators fit
    32-bit signed and that every ``Requant`` clip range matches its bitwidth.
    """
    diag: List[dict] = []
    produced = {0}
    for i, op in enumerate(p.ops):
        if op.kind not in KINDS:
            diag.append(_diag(i, op, f"unknown op kind {op.kind!r}"))
            continue
        for j in op.inputs:
            if j not in produced:
                diag.append(_diag(i, op, f"input slot {j} is not produced before use"))
            elif p.slots[j].domain == REAL:
                diag.append(_diag(i, op, f"consumes real-valued slot {j}"))
        out_domain = p.slots[op.output].domain if op.output < len(p.slots) else None
        if op.kind == "Dequant":
            if out_domain != REAL:
                diag.append(_diag(i, op, "Dequant must produce the real domain"))
            if op.output not in p.outputs:
                diag.append(_diag(i, op, "Dequant is not terminal"))
        else:
            if out_domain == REAL:
                diag.append(_diag(i, op, "execution op produces real-valued data"))
            for k, v in op.attrs.items():
                if isinstance(v, np.ndarray) and not _is_int_array(v):
                    diag.append(_diag(i, op, f"constant {k!r} has non-integer dtype {v.dtype}"))
                elif isinstance(v, float):
                    diag.append(_diag(i, op, f"constant {k!r} is real-valued"))
            for k in _INT_ATTRS.get(op.kind, ()):
                if k not in op.attrs:
                    diag.append(_diag(i, op, f"missing constant {k!r}"))
        if op.kind == "Requant":
            bits = int(op.attrs["bits"])
            want = (0, levels(bits))
            if (int(op.attrs["lo"]), int(op.attrs["hi"])) != want:
                diag.append(_diag(i, op, f"clip range {op.attrs['lo']}..{op.attrs['hi']} != {want} for {bits} bits"))
            if np.any(np.asarray(op.attrs["d"]) < 0) or np.any(np.asarray(op.attrs["c"]) < 0):
                diag.append(_diag(i, op, "negative dyadic constant"))
        if op.kind == "IntConv":
            w = op.attrs.get("weight")
            wb = int(op.attrs.get("w_bits", 8))
            if _is_int_array(w) and w.size and np.abs(w).max() > levels(wb):
                diag.append(_diag(i, op, f"mapped weight exceeds +-{levels(wb)}"))
        produced.add(op.output)
    for o in p.outputs:
        if o not in produced:
            diag.append({"op_index": None, "kind": None, "name": "", "message": f"output slot {o} never produced"})
    max_acc = 0
    peaks: List[int] = []
    if not diag:
        peaks_diag: List[dict] = []
        _, peaks = propagate_bounds(p, peaks_diag)
        diag.extend(peaks_diag)
        for i, (op, pk) in enumerate(zip(p.ops, peaks)):
            if pk > ACC_MAX:
                diag.append(_diag(i, op, f"worst-case accumulator {pk} exceeds {ACC_MAX}"))
        max_acc = max(peaks, default=0)
    return {
        "valid": not diag,
        "n_ops": len(p.ops),
        "max_accumulator": int(max_acc),
        "acc_limit": ACC_MAX,
        "per_op_bound": [int(v) for v in peaks],
        "diagnostics": diag,
    }


# ---------------------------------------------------------------------------
# plan file


def _encode_attrs(attrs: dict, blob: bytearray) -> dict:
    out = {}
    for k, v in attrs.items():
        if isinstance(v, np.ndarray):
            if _is_int_array(v):
                data = np.ascontiguousarray(v, dtype="<i8").tobytes()
                out[k] = {"int_array": {"offset": len(blob), "shape": list(v.shape)}}
                blob.extend(data)
            else:
                out[k] = {"real_array": [float(x) for x in v.ravel()], "shape": list(v.shape)}
        elif isinstance(v, (np.integer, np.bool_)):
            out[k] = v.item()
        else:
            out[k] = v
    return out


def _decode_attrs(attrs: dict, blob: bytes) -> dict:
    out = {}
    for k, v in attrs.items():
        if isinstance(v, dict) and "int_array" in v:
            spec = v["int_array"]
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.frombuffer(blob, dtype="<i8", count=n, offset=spec["offset"])
            out[k] = arr.astype(np.int64).reshape(spec["shape"])
        elif isinstance(v, dict) and "real_array" in v:
            out[k] = np.array(v["real_array"], dtype=np.float64).reshape(v["shape"])
        else:
            out[k] = v
    return out


def to_bytes(p: IntegerPlan) -> bytes:
    blob = bytearray()
    ops = [
        {"kind": op.kind, "name": op.name, "inputs": list(op.inputs), "output": op.output,
         "attrs": _encode_attrs(op.attrs, blob)}
        for op in p.ops
    ]
    slots = [
        {"shape": list(s.shape), "domain": s.domain, "bits": s.bits, "per_tensor": s.per_tensor,
         "alpha": [float(a) for a in s.alpha]}
        for s in p.slots
    ]
    header = {
        "format": MAGIC,
        "version": VERSION,
        "meta": p.meta,
        "slots": slots,
        "outputs": list(p.outputs),
        "ops": ops,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    text = json.dumps(header, sort_keys=True).encode()
    return f"{MAGIC} {VERSION} {len(text)}\n".encode() + text + b"\n" + bytes(blob)


def _parse_first_line(first: bytes):
    parts = first.decode("ascii", "replace").split()
    if len(parts) != 3 or parts[0] != MAGIC:
        raise PlanError("not a plan file")
    try:
        version, size = int(parts[1]), int(parts[2])
    except ValueError as e:
        raise PlanError(f"malformed plan header line: {first!r}") from e
    return version, size


def from_bytes(data: bytes) -> IntegerPlan:
    first, _, rest = data.partition(b"\n")
    version, size = _parse_first_line(first)
    if version != VERSION:
        raise FormatVersionError(f"plan format version {version}, expected {VERSION}")
    header = json.loads(rest[:size])
    if header.get("version") != VERSION:
        raise FormatVersionError(f"plan header version {header.get('version')}, expected {VERSION}")
    blob = rest[size + 1 :]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise PlanError("plan constant section is corrupt (hash mismatch)")
    slots = [Slot(s["shape"], s["domain"], np.array(s["alpha"]), s["bits"], s["per_tensor"]) for s in header["slots"]]
    ops = [
        PlanOp(o["kind"], o["inputs"], o["output"], _decode_attrs(o["attrs"], blob), o["name"])
        for o in header["ops"]
    ]
    return IntegerPlan(ops, slots, header["outputs"], header["meta"])


def save(p: IntegerPlan, path: Union[str, Path]) -> str:
    data = to_bytes(p)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: Union[str, Path]) -> IntegerPlan:
    return from_bytes(Path(path).read_bytes())


def with_op(p: IntegerPlan, index: int, **attrs) -> IntegerPlan:
    """Copy of ``p`` with attributes of op ``index`` replaced (fault injection, ablations)."""
    ops = list(p.ops)
    op = ops[index]
    ops[index] = PlanOp(op.kind, op.inputs, op.output, {**op.attrs, **attrs}, op.name)
    return IntegerPlan(ops, p.slots, p.outputs, p.meta)


__all__ = [
    "ACCUMULATOR",
    "ACC_MIN",
    "EXEC_KINDS",
    "IntegerPlan",
    "KINDS",
    "PlanError",
    "PlanOp",
    "REAL",
    "Slot",
    "UNSIGNED",
    "empty_plan",
    "from_bytes",
    "load",
    "input_bounds",
    "op_bounds",
    "propagate_bounds",
    "save",
    "to_bytes",
    "validate_plan",
    "with_op",
]
