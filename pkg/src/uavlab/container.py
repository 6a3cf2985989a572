"""Named-tensor binary container shared by the feature cache and weight files.

Layout (all integers little-endian)::

    magic    4 bytes   b"UVTC"
    version  uint16    1
    count    uint32    number of entries
    entry*   count times:
        name_len uint16
        name     utf-8 bytes (dot-paths for weights, sample ids for features)
        ndim     uint8
        dims     uint32 * ndim   (a feature grid is ndim=2: rows, cols)
        data     float32 * prod(dims), row-major

Entries keep their on-disk order on read.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"UVTC"
VERSION = 1


class ContainerFormatError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported container version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise ContainerFormatError(f"{path}: entry {name!r} truncated")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
    except struct.error as exc:
        raise ContainerFormatError(f"{path}: truncated header ({exc})") from None
    return out
