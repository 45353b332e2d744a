"""``PTMW`` parameter files.

Layout (little-endian): ``b"PTMW"``, u32 version, u32 count, then per
parameter: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PTMW_MAGIC = b"PTMW"
PTMW_VERSION = 1


class ParameterFormatError(ValueError):
    pass


def write_ptmw(arrays: dict[str, np.ndarray], path) -> None:
    buf = bytearray(struct.pack("<4sII", PTMW_MAGIC, PTMW_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
        buf += a.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_ptmw(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sII", raw, 0)
    except struct.error as exc:
        raise ParameterFormatError(f"{path}: truncated header") from exc
    if magic != PTMW_MAGIC:
        raise ParameterFormatError(f"{path}: bad magic {magic!r}")
    if version != PTMW_VERSION:
        raise ParameterFormatError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(raw):
                raise ParameterFormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise ParameterFormatError(f"{path}: truncated record") from exc
    if off != len(raw):
        raise ParameterFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out
