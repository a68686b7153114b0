"""Small reference networks used by tests, demos and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .graph import GraphBuilder, ModelGraph


def two_conv_net(seed: int = 0, in_shape=(1, 8, 8), width: int = 4, classes: int = 3) -> ModelGraph:
    """input quant -> conv/BN/ReLU -> quant -> conv/BN -> global max pool -> output."""
    b = GraphBuilder(in_shape, np.random.default_rng(seed), "two_conv")
    x = b.input_quant(0)
    x = b.conv(x, "conv1", width, io=True)
    x = b.relu(b.bn(x, "bn1"))
    x = b.act_quant(x, "q2")
    x = b.conv(x, "conv2", classes)
    x = b.bn(x, "bn2")
    x = b.maxpool(x, in_shape[1])
    return b.build([b.output(x)])


def linear_classifier(features: int, classes: int, seed: int = 0) -> ModelGraph:
    """A single linear layer over a ``(features, 1, 1)`` input."""
    b = GraphBuilder((features, 1, 1), np.random.default_rng(seed), "linear")
    return b.build([b.linear(0, "fc", classes)])


def residual_block_net(seed: int = 0, in_shape=(1, 8, 8), width: int = 4, classes: int = 3) -> ModelGraph:
    """Stem conv, one residual block whose skip carries the quantized block input."""
    b = GraphBuilder(in_shape, np.random.default_rng(seed), "residual")
    x = b.input_quant(0)
    x = b.relu(b.bn(b.conv(x, "stem", width, io=True), "stem.bn"))
    xq = b.act_quant(x, "block.in")
    y = b.relu(b.bn(b.conv(xq, "block.conv1", width), "block.bn1"))
    y = b.act_quant(y, "block.mid")
    y = b.bn(b.conv(y, "block.conv2", width), "block.bn2")
    y = b.relu(b.add(y, xq, "block.add"))
    y = b.act_quant(y, "head.in", io=True)
    y = b.bn(b.conv(y, "head", classes, k=1, io=True), "head.bn")
    y = b.maxpool(y, in_shape[1])
    return b.build([b.output(y)])
