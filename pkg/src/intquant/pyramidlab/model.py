"""FPN-style toy classifier: a strided trunk, a top-down path, one head per level.

The head is shared across levels: its convolution weights and its
quantization intervals, including the one applied to the pyramid features.
Head normalization comes in three modes. ``shared`` is one BN module called
once per level: each call normalizes with that level's batch statistics in
training and all calls update one running estimate used at inference.
``shared_pooled`` also has one BN, but its training statistics are pooled
over all levels, so training and inference agree. ``multilevel`` keeps a
private BN per level. Their normalization is
either one BN whose batch statistics are pooled over all levels (``shared``)
or one private BN per level (``multilevel``).
"""

from __future__ import annotations

from typing import List

import numpy as np

from ..traingraph.graph import GraphBuilder, ModelGraph

BN_MODES = ("shared", "multilevel", "shared_pooled")
BITS = ("fp", 2, 3, 4)
HEAD_BN = ("head.bn1", "head.bn2")


def build_fpn_model(
    bn_mode: str = "multilevel",
    bits="fp",
    width: int = 16,
    classes: int = 3,
    side: int = 32,
    seed: int = 0,
    tied: bool = False,
) -> ModelGraph:
    """Three levels at strides 4, 8 and 16; level 0 is the finest.

    ``bits`` only records the intended bitwidth in ``meta``; quantization is
    assigned later from a trained full-precision model. With ``tied`` every
    head reads the level-0 feature map, which makes per-level inputs identical.
    """
    if bn_mode not in BN_MODES:
        raise ValueError(f"bn_mode must be one of {BN_MODES}, got {bn_mode!r}")
    if bits not in BITS:
        raise ValueError(f"bits must be one of {BITS}, got {bits!r}")
    b = GraphBuilder((1, side, side), np.random.default_rng(seed), "fpn")

    def block(x, name, out, k=3, stride=1, relu=True, io=False):
        y = b.bn(b.conv(x, name, out, k=k, stride=stride, io=io), name + ".bn")
        return b.relu(y) if relu else y

    x = b.input_quant(0)
    x = b.act_quant(block(x, "stem", width, stride=2, io=True), "stem.q")
    c0 = b.act_quant(block(x, "c0", width, stride=2), "c0.q")
    c1 = b.act_quant(block(c0, "c1", width, stride=2), "c1.q")
    c2 = block(c1, "c2", width, stride=2)
    # one interval for every level: the head, quantizers included, is shared
    p2 = b.act_quant(c2, "head.in")
    lat1 = block(c1, "lat1", width, k=1, relu=False)
    p1 = b.act_quant(b.relu(b.add(lat1, b.upsample(p2), "p1.add")), "head.in")
    lat0 = block(c0, "lat0", width, k=1, relu=False)
    p0 = b.act_quant(b.relu(b.add(lat0, b.upsample(p1), "p0.add")), "head.in")
    p = [p0, p0, p0] if tied else [p0, p1, p2]

    # layer-major order: pooled shared BN needs every level's input first
    L = range(3)
    h = [b.conv(p[l], f"head.conv1.l{l}", width, weight="head.conv1.w") for l in L]
    h = [_norm(b, h[l], HEAD_BN[0], bn_mode, l) for l in L]
    h = [b.act_quant(b.relu(h[l]), "head.q") for l in L]
    h = [b.conv(h[l], f"head.cls.l{l}", classes, k=1, weight="head.cls.w", io=True) for l in L]
    h = [_norm(b, h[l], HEAD_BN[1], bn_mode, l) for l in L]
    outs = [b.output(b.maxpool(h[l], b.shapes[h[l]][1], name=f"head.pool.l{l}"), name=f"output.l{l}") for l in L]
    return b.build(outs, pyramid_levels=3, bn_mode=bn_mode, bits=bits, width=width, tied=tied)


def _norm(b: GraphBuilder, x: int, key: str, mode: str, lvl: int) -> int:
    if mode.startswith("shared"):
        stats = "pooled" if mode == "shared_pooled" else "per_call"
        return b.bn(x, key, name=f"{key}.l{lvl}", stats=stats)
    return b.mlbn(x, [f"{key}.l{i}" for i in range(3)], level=lvl, name=f"{key}.l{lvl}")


def bn_keys(g: ModelGraph, layer: str) -> List[str]:
    """BN parameter prefixes of head layer ``layer`` in level order."""
    keys = []
    for lvl in range(g.pyramid_levels):
        node = next(n for n in g.nodes if n.name == f"{layer}.l{lvl}")
        keys.append(node.attrs["key"] if node.op == "bn" else node.attrs["keys"][lvl])
    return keys


def param_count(g: ModelGraph, keys=None) -> int:
    return int(sum(np.size(v) for k, v in g.params.items() if keys is None or k in keys))


def head_bn_param_count(g: ModelGraph) -> int:
    keys = {f"{k}.{p}" for layer in HEAD_BN for k in set(bn_keys(g, layer)) for p in ("gamma", "beta")}
    return param_count(g, keys)


def conv_param_count(g: ModelGraph) -> int:
    keys = {n.attrs["weight"] for n in g.nodes if n.op in ("conv", "linear")}
    return param_count(g, keys)


def with_tied_inputs(g: ModelGraph, tie_bn: bool = False) -> ModelGraph:
    """Copy of ``g`` whose heads all read the level-0 pyramid features.

    With ``tie_bn`` every level's private head BN also takes the level-0
    parameters and running statistics, so all per-level head activations are
    identical, not just the first BN's inputs.
    """
    g = g.copy()
    first = next(n for n in g.nodes if n.name == "head.conv1.l0")
    for lvl in range(1, g.pyramid_levels):
        node = next(n for n in g.nodes if n.name == f"head.conv1.l{lvl}")
        node.inputs = first.inputs
    if tie_bn:
        for layer in HEAD_BN:
            keys = bn_keys(g, layer)
            for k in keys[1:]:
                for store, fields in ((g.params, ("gamma", "beta")), (g.state, ("mean", "var"))):
                    for f in fields:
                        store[f"{k}.{f}"] = store[f"{keys[0]}.{f}"].copy()
    g.meta["tied"] = True
    return g
