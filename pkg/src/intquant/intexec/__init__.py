"""Bit-exact integer execution, plan analysis and verification."""

from .census import CostError, CostModel, ENERGY_PJ, estimate_cost, float_equivalent, op_census
from .executor import AccumulatorOverflow, ExecError, ExecReport, ExecResult, exec_plan
from .reference import simulate_plan
from .verify import ProvenanceError, compare_values, verify

__all__ = [
    "AccumulatorOverflow",
    "CostError",
    "CostModel",
    "ExecError",
    "ExecReport",
    "ExecResult",
    "ProvenanceError",
    "ENERGY_PJ",
    "compare_values",
    "estimate_cost",
    "exec_plan",
    "float_equivalent",
    "op_census",
    "simulate_plan",
    "verify",
]
