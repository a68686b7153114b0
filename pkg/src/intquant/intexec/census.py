"""Static op census of a plan and an energy estimate priced per primitive (45 nm energy figures).

Census keys are ``<primitive>.<bits>``: ``mult.8`` (low-bit fixed multiply),
``add.32``, ``mult.32``, ``shift.32``, ``compare.32`` and the float entries
``fadd.32``, ``fmult.32``, ``fadd.16``, ``fmult.16``. A valid plan never
produces a float entry; the terminal Dequant is output conversion and is
reported separately as ``dequant_elements``, not as arithmetic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Mapping

import numpy as np

from ..lowering.plan import IntegerPlan

INTEGER_KEYS = ("mult.8", "add.32", "mult.32", "shift.32", "compare.32")
FLOAT_KEYS = ("fadd.32", "fmult.32", "fadd.16", "fmult.16")

ENERGY_PJ = {
    "add.8": 0.03,
    "mult.8": 0.2,
    "add.32": 0.1,
    "mult.32": 3.1,
    "fadd.32": 0.9,
    "fmult.32": 3.7,
    "fadd.16": 0.4,
    "fmult.16": 1.1,
}


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Energy per primitive in pJ.

    The energy table has no shift or compare entry; by default both are priced like a
    32-bit fixed add. Override through ``prices``.
    """

    prices: Mapping[str, float] = field(
        default_factory=lambda: {**ENERGY_PJ, "shift.32": 0.1, "compare.32": 0.1}
    )

    def __post_init__(self):
        bad = [k for k, v in self.prices.items() if not v > 0]
        if bad:
            raise CostError(f"non-positive price for {bad}")

    @classmethod
    def with_overrides(cls, overrides: Mapping[str, float]) -> "CostModel":
        return cls({**cls().prices, **overrides})


def op_census(p: IntegerPlan) -> Dict[str, int]:
    """Exact primitive counts per sample, derived from slot shapes and op attributes."""
    counts: Counter = Counter({k: 0 for k in INTEGER_KEYS})
    dequant = 0
    for op in p.ops:
        out = p.slots[op.output]
        n_out = int(np.prod(out.shape))
        a = op.attrs
        if op.kind == "IntConv":
            taps = int(np.prod(np.shape(a["weight"])[1:]))
            counts["mult.8"] += n_out * taps
            counts["add.32"] += n_out * (taps - 1)
        elif op.kind == "BnOffsetAdd":
            counts["add.32"] += n_out
        elif op.kind == "Requant":
            counts["mult.32"] += n_out
            counts["add.32"] += n_out
            counts["shift.32"] += n_out
            counts["compare.32"] += 2 * n_out
        elif op.kind == "DyadicSkipAdd":
            counts["mult.32"] += n_out
            counts["add.32"] += 2 * n_out
            counts["shift.32"] += n_out
        elif op.kind == "IntMaxPool":
            k = int(a["k"])
            counts["compare.32"] += n_out * (k * k - 1)
        elif op.kind == "Dequant":
            dequant += n_out
    result = dict(counts)
    result["dequant_elements"] = dequant
    return result


def arithmetic(census: Mapping[str, int]) -> Dict[str, int]:
    return {k: int(v) for k, v in census.items() if k != "dequant_elements"}


def estimate_cost(census: Mapping[str, int], model: CostModel = None) -> float:
    """Energy in pJ: counts dotted with prices. Unpriced non-zero entries raise.

    Prices are summed as exact decimals, so 0.2 + 0.1 comes out as 0.3.
    """
    model = model or CostModel()
    total = Fraction(0)
    for k, n in arithmetic(census).items():
        if not n:
            continue
        if k not in model.prices:
            raise CostError(f"census entry {k!r} has no price in the cost model")
        total += int(n) * Fraction(str(model.prices[k]))
    return float(total)


def float_equivalent(census: Mapping[str, int]) -> Dict[str, int]:
    """The same op counts executed in 32-bit float: multiplies as ``fmult.32``, the rest as ``fadd.32``."""
    out: Counter = Counter()
    for k, n in arithmetic(census).items():
        out["fmult.32" if k.startswith(("mult", "fmult")) else "fadd.32"] += n
    return dict(out)


def macs(census: Mapping[str, int]) -> int:
    return int(census.get("mult.8", 0))
