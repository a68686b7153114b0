"""Synthetic pyramid task, FPN-style toy model and the multi-level BN experiments."""

from .data import LEVELS, SHAPES, MixtureError, PyramidSample, PyramidSet, assign_level, gen_dataset, size_thresholds
from .experiment import ExperimentConfig, format_table, results_to_csv, run_cell, run_experiment, sign_test, summarize
from .model import (
    BN_MODES,
    HEAD_BN,
    bn_keys,
    build_fpn_model,
    conv_param_count,
    head_bn_param_count,
    param_count,
    with_tied_inputs,
)
from .stats import StatsError, StatsRecord, collect_stats, stats_to_csv

__all__ = [
    "BN_MODES", "ExperimentConfig", "HEAD_BN", "LEVELS", "MixtureError", "PyramidSample", "PyramidSet",
    "SHAPES", "StatsError", "StatsRecord", "assign_level", "bn_keys", "build_fpn_model", "collect_stats",
    "conv_param_count", "format_table", "gen_dataset", "head_bn_param_count", "param_count",
    "results_to_csv", "run_cell", "run_experiment", "sign_test", "size_thresholds", "stats_to_csv", "summarize", "with_tied_inputs",
]
