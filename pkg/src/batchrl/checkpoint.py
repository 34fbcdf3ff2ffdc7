"""Named-array checkpoint container.

Layout, all integers little-endian::

    magic   b"BRLC"
    u32     format version (1)
    u32     array count
    repeated:
        u32     name length in bytes
        bytes   UTF-8 name
        u32     rank
        u32     dims[rank]
        f32     data[prod(dims)], row-major

Arrays are stored as 32-bit floats regardless of their in-memory dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BRLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if offset + 4 * size > len(data):
                raise CheckpointError(f"array {name!r} runs past end of file")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            out[name] = arr.reshape(dims).astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if offset != len(data):
        raise CheckpointError("trailing bytes after last array")
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
