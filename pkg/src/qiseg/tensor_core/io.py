"""Tensor file format.

One plain-text header line ``v1 <rank> <extent...> <precision>`` followed by
the raw little-endian values in row-major order.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ShapeError

_DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}


def _precision(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "u8"
    key = {("f", 8): "f64", ("f", 4): "f32", ("i", 4): "i32", ("i", 8): "i64", ("u", 1): "u8"}
    try:
        return key[arr.dtype.kind, arr.dtype.itemsize]
    except KeyError:
        raise ShapeError(f"unsupported tensor dtype {arr.dtype}") from None


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    prec = _precision(arr)
    header = " ".join(["v1", str(arr.ndim), *map(str, arr.shape), prec]) + "\n"
    body = np.ascontiguousarray(arr, dtype=_DTYPES[prec]).tobytes()
    return header.encode("ascii") + body


def loads(blob: bytes) -> np.ndarray:
    nl = blob.index(b"\n")
    parts = blob[:nl].decode("ascii").split()
    if not parts or parts[0] != "v1":
        raise ShapeError(f"bad tensor header {blob[:nl]!r}")
    rank = int(parts[1])
    shape = tuple(int(x) for x in parts[2:2 + rank])
    if len(parts) != rank + 3:
        raise ShapeError(f"tensor header rank {rank} does not match extents {parts[2:-1]}")
    dt = _DTYPES[parts[-1]]
    data = np.frombuffer(blob, dtype=dt, offset=nl + 1)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"tensor body has {data.size} values, header says shape {shape}")
    return data.reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
