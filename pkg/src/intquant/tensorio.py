"""Raw tensor files: one text header line, then little-endian array bytes.

Header: ``INTQ-TENSOR 1 <dtype> <d0,d1,...>`` with dtype one of ``u1``,
``i8`` or ``f8``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .traingraph.checkpoint import FormatVersionError

MAGIC = "INTQ-TENSOR"
VERSION = 1
DTYPES = {"u1": "u1", "i8": "<i8", "f8": "<f8"}


def to_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        code = "f8"
    elif a.dtype.kind in "iu":
        code = "u1" if a.dtype == np.uint8 else "i8"
    else:
        raise ValueError(f"unsupported dtype {a.dtype}")
    shape = ",".join(str(d) for d in a.shape)
    body = np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()
    return f"{MAGIC} {VERSION} {code} {shape}\n".encode() + body


def from_bytes(data: bytes) -> np.ndarray:
    first, _, body = data.partition(b"\n")
    parts = first.decode(errors="replace").split(" ")
    if len(parts) != 4 or parts[0] != MAGIC:
        raise ValueError("not a tensor file")
    if parts[1] != str(VERSION):
        raise FormatVersionError(f"tensor format version {parts[1]}, expected {VERSION}")
    if parts[2] not in DTYPES:
        raise ValueError(f"unknown tensor dtype {parts[2]!r}")
    shape = tuple(int(d) for d in parts[3].split(",") if d)
    dt = np.dtype(DTYPES[parts[2]])
    if len(body) != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
        raise ValueError("tensor body size does not match header shape")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save(a: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(a))


def load(path: Union[str, Path]) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
