"""Checkpoint files: a JSON text header followed by a float32 parameter blob.

Layout::

    INTQ-CKPT <version> <header-bytes>\\n
    <header JSON>\\n
    <little-endian float32 values, tensors in header order>

The header records the architecture, bitwidths, tensor names and shapes,
quantizer intervals (as readable text too), the seed/config, and the format
version. Loading a different version raises :class:`FormatVersionError`.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Union

import numpy as np

from .graph import ModelGraph, Node

MAGIC = "INTQ-CKPT"
VERSION = 1


class FormatVersionError(ValueError):
    pass


def _tensor_table(g: ModelGraph):
    table = [{"name": k, "store": "params", "shape": list(v.shape)} for k, v in g.params.items()]
    table += [{"name": k, "store": "state", "shape": list(v.shape)} for k, v in g.state.items()]
    return table


def to_bytes(g: ModelGraph, extra: dict = None) -> bytes:
    table = _tensor_table(g)
    blob = b"".join(
        np.ascontiguousarray(getattr(g, t["store"])[t["name"]], dtype="<f4").tobytes() for t in table
    )
    header = {
        "format": MAGIC,
        "version": VERSION,
        "graph": g.describe(),
        "meta": g.meta,
        "tensors": table,
        "intervals": {k: float(v) for k, v in g.params.items() if k.startswith("nu.")},
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    text = json.dumps(header, sort_keys=True).encode()
    return f"{MAGIC} {VERSION} {len(text)}\n".encode() + text + b"\n" + blob


def from_bytes(data: bytes) -> ModelGraph:
    first, _, rest = data.partition(b"\n")
    parts = first.decode(errors="replace").split()
    if len(parts) != 3 or parts[0] != MAGIC:
        raise ValueError("not a checkpoint file")
    if int(parts[1]) != VERSION:
        raise FormatVersionError(f"checkpoint version {parts[1]}, expected {VERSION}")
    n = int(parts[2])
    header = json.loads(rest[:n])
    blob = rest[n + 1 :]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ValueError("checkpoint blob hash mismatch")
    values = np.frombuffer(blob, dtype="<f4")
    params, state, off = {}, {}, 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        arr = values[off : off + size].astype(np.float64).reshape(t["shape"])
        off += size
        (params if t["store"] == "params" else state)[t["name"]] = arr
    if off != values.size:
        raise ValueError("checkpoint blob size does not match its tensor table")
    gd = header["graph"]
    nodes = []
    for nd in gd["nodes"]:
        attrs = dict(nd["attrs"])
        if "shape" in attrs:
            attrs["shape"] = tuple(attrs["shape"])
        nodes.append(Node(nd["op"], tuple(nd["inputs"]), nd["name"], attrs))
    return ModelGraph(
        nodes=nodes,
        params=params,
        state=state,
        outputs=list(gd["outputs"]),
        pyramid_levels=gd["pyramid_levels"],
        mode=gd["mode"],
        meta=header.get("meta", {}),
    )


def read_header(path: Union[str, Path]) -> dict:
    data = Path(path).read_bytes()
    first, _, rest = data.partition(b"\n")
    parts = first.decode(errors="replace").split()
    if len(parts) != 3 or parts[0] != MAGIC:
        raise ValueError("not a checkpoint file")
    return json.loads(rest[: int(parts[2])])


def save(g: ModelGraph, path: Union[str, Path], extra: dict = None) -> str:
    """Write ``g``; returns the sha256 of the file bytes."""
    data = to_bytes(g, extra)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: Union[str, Path]) -> ModelGraph:
    return from_bytes(Path(path).read_bytes())


def round_trip(g: ModelGraph) -> ModelGraph:
    """``g`` with every tensor rounded to float32, as it would be after save/load."""
    return from_bytes(to_bytes(g))
