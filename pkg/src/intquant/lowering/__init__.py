"""Compile fake-quant graphs into integer-only execution plans."""

from .dyadic import D_MAX_DEFAULT, DyadicError, DyadicRational, dyadic_approx, shift_round
from .lower import (
    LoweringError,
    build_requant,
    lower_bn,
    lower_conv,
    lower_model,
    lower_skip,
    quantize_input,
)
from .plan import IntegerPlan, PlanError, PlanOp, Slot, empty_plan, load, save, validate_plan

__all__ = [
    "D_MAX_DEFAULT",
    "DyadicError",
    "DyadicRational",
    "IntegerPlan",
    "LoweringError",
    "PlanError",
    "PlanOp",
    "Slot",
    "build_requant",
    "dyadic_approx",
    "empty_plan",
    "load",
    "lower_bn",
    "lower_conv",
    "lower_model",
    "lower_skip",
    "quantize_input",
    "save",
    "shift_round",
    "validate_plan",
]
