"""Flat, versioned parameter container.

Layout (all integers little-endian)::

    magic     4 bytes   b"CGCK"
    version   u16       currently 1
    dtype     u8        1 = float32, 2 = float64
    count     u32       number of entries
    entries, sorted by name:
        name_len  u16
        name      utf-8 bytes
        ndim      u8
        dims      u32 * ndim
        data      prod(dims) elements, little-endian, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CGCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    arrays = {k: np.asarray(v) for k, v in params.items()}
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"mixed element types {sorted(map(str, dtypes))}")
    dtype = dtypes.pop() if dtypes else np.dtype(np.float32)
    code = _CODES.get(np.dtype(dtype))
    if code is None:
        raise CheckpointError(f"unsupported element type {dtype}")
    parts = [MAGIC, struct.pack("<HBI", VERSION, code, len(arrays))]
    for name in sorted(arrays):
        a = arrays[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, code, count = struct.unpack_from("<HBI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if code not in _DTYPES:
        raise CheckpointError(f"unknown element type code {code}")
    dtype = _DTYPES[code]
    pos = 4 + struct.calcsize("<HBI")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + size > len(blob):
            raise CheckpointError(f"truncated entry {name!r}")
        out[name] = np.frombuffer(blob, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(params))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
