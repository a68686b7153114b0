"""Layer graph for small fake-quantized CNNs.

A :class:`ModelGraph` is a topologically ordered list of :class:`Node` records
plus named parameter and running-statistic arrays. Nodes refer to parameters
by key, so several nodes may share weights (the pyramid head does this).

Node ops and their attributes:

``input``        shape=(C, H, W)
``input_quant``  nu, bits              8-bit quantization of the raw input
``act_quant``    nu, bits              unsigned fake quantization point
``conv``         weight, nu, bits, stride, padding
``linear``       weight, nu, bits
``bn``           key, eps, momentum, stats (pooled or per_call, see engine)
``mlbn``         keys, level, eps, momentum   one BN per pyramid level
``relu``, ``upsample`` (factor 2), ``maxpool`` (k), ``add`` (two inputs)
``output``       nu, bits              symmetric 8-bit output quantizer
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..kernels import conv_out_size

OPS = (
    "input",
    "input_quant",
    "act_quant",
    "conv",
    "linear",
    "bn",
    "mlbn",
    "relu",
    "maxpool",
    "upsample",
    "add",
    "output",
)
NORM_OPS = ("bn", "mlbn")
GAMMA_MIN = 1e-3


class GraphError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...] = ()
    name: str = ""
    attrs: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    nodes: List[Node]
    params: Dict[str, np.ndarray]
    state: Dict[str, np.ndarray]
    outputs: List[int]
    pyramid_levels: int = 1
    mode: str = "fp"
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def consumers(self) -> List[List[int]]:
        users: List[List[int]] = [[] for _ in self.nodes]
        for i, node in enumerate(self.nodes):
            for j in node.inputs:
                users[j].append(i)
        return users

    def bn_key(self, idx: int, level: Optional[int] = None) -> str:
        """Resolve the BatchNorm parameter prefix used by node ``idx``."""
        node = self.nodes[idx]
        if node.op == "bn":
            return node.attrs["key"]
        lvl = node.attrs.get("level")
        if lvl is None:
            lvl = 0 if level is None else level
        keys = node.attrs["keys"]
        if not 0 <= lvl < len(keys):
            raise GraphError(f"level {lvl} out of range for {node.name} ({len(keys)} levels)")
        return keys[lvl]

    def architecture(self) -> list:
        """Structure description without parameter values, for compatibility checks."""
        out = []
        for n in self.nodes:
            attrs = {k: v for k, v in _jsonable(n.attrs).items() if k != "bits"}
            out.append({"op": n.op, "inputs": list(n.inputs), "name": n.name, "attrs": attrs})
        return out

    def describe(self) -> dict:
        """JSON-ready structure including bitwidths, without parameter values."""
        return {
            "nodes": [
                {"op": n.op, "inputs": list(n.inputs), "name": n.name, "attrs": _jsonable(n.attrs)}
                for n in self.nodes
            ],
            "outputs": list(self.outputs),
            "pyramid_levels": self.pyramid_levels,
            "mode": self.mode,
        }

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def digest(self) -> str:
        """Hash of structure, bitwidths and parameter bytes (float32)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.describe(), sort_keys=True).encode())
        for store in (self.params, self.state):
            for k in store:
                h.update(k.encode())
                h.update(np.asarray(store[k], dtype="<f4").tobytes())
        return h.hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def infer_shapes(g: ModelGraph) -> List[Tuple[int, ...]]:
    """Per-node output shapes, excluding the batch axis. Raises on mismatch."""
    shapes: List[Tuple[int, ...]] = []
    users = g.consumers()
    for i, node in enumerate(g.nodes):
        if node.op not in OPS:
            raise GraphError(f"node {i} ({node.name}): unknown op {node.op!r}")
        if any(j >= i for j in node.inputs):
            raise GraphError(f"node {i} ({node.name}): inputs must precede the node")
        ins = [shapes[j] for j in node.inputs]
        a = node.attrs
        if node.op == "input":
            if i != 0:
                raise GraphError("input must be node 0")
            shapes.append(tuple(a["shape"]))
            continue
        if node.op == "add":
            if len(ins) != 2:
                raise GraphError(f"node {i} ({node.name}): add needs exactly two inputs")
            if ins[0] != ins[1]:
                raise GraphError(f"node {i} ({node.name}): add shapes {ins[0]} vs {ins[1]}")
            shapes.append(ins[0])
            continue
        if len(ins) != 1:
            raise GraphError(f"node {i} ({node.name}): expected one input")
        s = ins[0]
        if node.op == "conv":
            w = g.params[a["weight"]]
            o, c, kh, kw = w.shape
            if len(s) != 3 or s[0] != c:
                raise GraphError(f"node {i} ({node.name}): conv expects {c} channels, got {s}")
            ho = conv_out_size(s[1], kh, a["stride"], a["padding"])
            wo = conv_out_size(s[2], kw, a["stride"], a["padding"])
            shapes.append((o, ho, wo))
            if not users[i] or any(g.nodes[u].op not in NORM_OPS for u in users[i]):
                raise GraphError(f"node {i} ({node.name}): conv must feed a normalization layer")
        elif node.op == "linear":
            w = g.params[a["weight"]]
            if int(np.prod(s)) != w.shape[1]:
                raise GraphError(f"node {i} ({node.name}): linear expects {w.shape[1]} features")
            shapes.append((w.shape[0], 1, 1))
        elif node.op in NORM_OPS:
            keys = [a["key"]] if node.op == "bn" else a["keys"]
            for k in keys:
                if g.params[k + ".gamma"].shape != (s[0],):
                    raise GraphError(f"node {i} ({node.name}): BN width mismatch for {k}")
            shapes.append(s)
        elif node.op == "maxpool":
            k = a["k"]
            if s[1] % k or s[2] % k:
                raise GraphError(f"node {i} ({node.name}): pool {k} does not tile {s}")
            shapes.append((s[0], s[1] // k, s[2] // k))
        elif node.op == "upsample":
            shapes.append((s[0], s[1] * 2, s[2] * 2))
        elif node.op == "output":
            shapes.append((int(np.prod(s)),))
        else:
            shapes.append(s)
    return shapes


class GraphBuilder:
    """Incremental construction with deterministic parameter initialization."""

    def __init__(self, in_shape: Sequence[int], rng: np.random.Generator, name: str = "model"):
        self.rng = rng
        self.nodes: List[Node] = [Node("input", (), "input", {"shape": tuple(in_shape)})]
        self.params: Dict[str, np.ndarray] = {}
        self.state: Dict[str, np.ndarray] = {}
        self.shapes: List[Tuple[int, ...]] = [tuple(in_shape)]
        self.name = name

    def _add(self, op, inputs, name, attrs, shape) -> int:
        self.nodes.append(Node(op, tuple(inputs), name, attrs))
        self.shapes.append(tuple(shape))
        return len(self.nodes) - 1

    def input_quant(self, x: int, nu: float = 1.0, bits: int = 8) -> int:
        key = "nu.input"
        self.params[key] = np.array(float(nu))
        return self._add("input_quant", [x], "input_quant", {"nu": key, "bits": bits}, self.shapes[x])

    def act_quant(self, x: int, name: str, nu: float = 1.0, io: bool = False) -> int:
        key = f"nu.{name}"
        if key not in self.params:
            self.params[key] = np.array(float(nu))
        return self._add("act_quant", [x], name, {"nu": key, "bits": None, "io": io}, self.shapes[x])

    def conv(self, x, name, out_ch, k=3, stride=1, padding=None, io=False, weight=None) -> int:
        c, h, w = self.shapes[x]
        padding = k // 2 if padding is None else padding
        key = weight or f"{name}.w"
        if key not in self.params:
            fan_in = c * k * k
            self.params[key] = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, c, k, k))
            self.params["nu." + key] = np.array(1.0)
        out_ch = self.params[key].shape[0]
        attrs = {
            "weight": key,
            "nu": "nu." + key,
            "bits": None,
            "stride": stride,
            "padding": padding,
            "io": io,
        }
        ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
        return self._add("conv", [x], name, attrs, (out_ch, ho, wo))

    def linear(self, x, name, out_features, io=False) -> int:
        f = int(np.prod(self.shapes[x]))
        key = f"{name}.w"
        self.params[key] = self.rng.normal(0.0, np.sqrt(1.0 / f), (out_features, f))
        self.params["nu." + key] = np.array(1.0)
        attrs = {"weight": key, "nu": "nu." + key, "bits": None, "io": io}
        return self._add("linear", [x], name, attrs, (out_features, 1, 1))

    def _bn_params(self, key, c):
        if key not in self.state.keys() and key + ".gamma" not in self.params:
            self.params[key + ".gamma"] = np.ones(c)
            self.params[key + ".beta"] = np.zeros(c)
            self.state[key + ".mean"] = np.zeros(c)
            self.state[key + ".var"] = np.ones(c)

    def bn(self, x, key, eps=1e-5, momentum=0.1, name=None, stats="pooled") -> int:
        if stats not in ("pooled", "per_call"):
            raise GraphError(f"stats must be pooled or per_call, got {stats!r}")
        self._bn_params(key, self.shapes[x][0])
        attrs = {"key": key, "eps": eps, "momentum": momentum}
        if stats != "pooled":
            attrs["stats"] = stats
        return self._add("bn", [x], name or key, attrs, self.shapes[x])

    def mlbn(self, x, keys, level=None, eps=1e-5, momentum=0.1, name=None) -> int:
        for k in keys:
            self._bn_params(k, self.shapes[x][0])
        attrs = {"keys": list(keys), "level": level, "eps": eps, "momentum": momentum}
        return self._add("mlbn", [x], name or keys[0], attrs, self.shapes[x])

    def relu(self, x, name=None) -> int:
        return self._add("relu", [x], name or f"relu{len(self.nodes)}", {}, self.shapes[x])

    def maxpool(self, x, k, name=None) -> int:
        c, h, w = self.shapes[x]
        return self._add("maxpool", [x], name or f"pool{len(self.nodes)}", {"k": k}, (c, h // k, w // k))

    def upsample(self, x, name=None) -> int:
        c, h, w = self.shapes[x]
        return self._add("upsample", [x], name or f"up{len(self.nodes)}", {"factor": 2}, (c, 2 * h, 2 * w))

    def add(self, a, b, name=None) -> int:
        return self._add("add", [a, b], name or f"add{len(self.nodes)}", {}, self.shapes[a])

    def output(self, x, name="output", nu=4.0, key="nu.output") -> int:
        if key not in self.params:
            self.params[key] = np.array(float(nu))
        n = int(np.prod(self.shapes[x]))
        return self._add("output", [x], name, {"nu": key, "bits": None, "io": True}, (n,))

    def build(self, outputs: Sequence[int], pyramid_levels: int = 1, **meta) -> ModelGraph:
        g = ModelGraph(
            nodes=self.nodes,
            params=self.params,
            state=self.state,
            outputs=list(outputs),
            pyramid_levels=pyramid_levels,
            mode="fp",
            meta={"name": self.name, **meta},
        )
        infer_shapes(g)
        return g


def quantized_nodes(g: ModelGraph) -> List[int]:
    return [i for i, n in enumerate(g.nodes) if "bits" in n.attrs]


def set_bits(g: ModelGraph, bits: int, io_bits: int = 8) -> None:
    """Assign bitwidths: ``io_bits`` for input/output layers, ``bits`` elsewhere."""
    for i in quantized_nodes(g):
        n = g.nodes[i]
        if n.op == "input_quant":
            n.attrs["bits"] = io_bits
        else:
            n.attrs["bits"] = io_bits if n.attrs.get("io") else bits
    g.mode = "qat"
