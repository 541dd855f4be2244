"""Binary matrix blocks shared by map sidecars and index files.

Block layout (little-endian)::

    b"HLOC" | version u32 | dim u32 | count u64 | count*dim values, row-major

Version 1 carries float32 values (descriptor sidecars), version 2 float64.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import SchemaError

MAGIC = b"HLOC"
HEADER = struct.Struct("<4sIIQ")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_block(fh, matrix: np.ndarray, dtype, version: int) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    out_dtype = _DTYPES[version]
    if np.dtype(dtype).itemsize != out_dtype.itemsize:
        raise ValueError(f"version {version} stores {out_dtype}, got {np.dtype(dtype)}")
    count, dim = matrix.shape
    fh.write(HEADER.pack(MAGIC, version, dim, count))
    fh.write(np.ascontiguousarray(matrix, dtype=out_dtype).tobytes())


def read_block(fh, dtype, version: int, *, expect_dim: int | None = None, expect_count: int | None = None) -> np.ndarray:
    raw = fh.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise SchemaError("truncated binary block header")
    magic, got_version, dim, count = HEADER.unpack(raw)
    if magic != MAGIC:
        raise SchemaError(f"bad block magic {magic!r}, expected {MAGIC!r}")
    if got_version != version:
        raise SchemaError(f"unsupported block version {got_version}, expected {version}")
    if expect_dim is not None and dim != expect_dim:
        raise SchemaError(f"block dimension {dim}, header declares {expect_dim}")
    if expect_count is not None and count != expect_count:
        raise SchemaError(f"block holds {count} rows, expected {expect_count}")
    in_dtype = _DTYPES[version]
    nbytes = count * dim * in_dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise SchemaError("truncated binary block payload")
    return np.frombuffer(payload, dtype=in_dtype).reshape(count, dim).astype(dtype)
