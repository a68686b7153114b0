"""Deterministic numpy training engine for small fake-quantized CNNs."""

from .checkpoint import load, save
from .engine import backward, bn_update_stats, forward
from .graph import GAMMA_MIN, GraphBuilder, GraphError, ModelGraph, Node, infer_shapes, set_bits
from .train import (
    Dataset,
    TrainConfig,
    TrainingError,
    evaluate,
    init_quantized_from_fp,
    sgd_step,
    train,
)

__all__ = [
    "GAMMA_MIN",
    "Dataset",
    "GraphBuilder",
    "GraphError",
    "ModelGraph",
    "Node",
    "TrainConfig",
    "TrainingError",
    "backward",
    "bn_update_stats",
    "evaluate",
    "forward",
    "infer_shapes",
    "init_quantized_from_fp",
    "load",
    "save",
    "set_bits",
    "sgd_step",
    "train",
]
