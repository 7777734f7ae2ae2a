"""FLEXCKPT binary checkpoint format.

Layout (all integers little-endian)::

    b"FLEXCKPT"  u32 version  u64 count
    count x { u32 name_len, name (utf-8), u32 rank, rank x u64 extents, f32 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLEXCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_arrays(path, arrays: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    version, count = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8 + 12
    out = {}
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated payload for entry {i} ({name})")
            out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header at entry {len(out)}") from exc
    return out


def save_module(path, module) -> None:
    save_arrays(path, module.state_dict())


def load_module(path, module) -> None:
    module.load_state_dict(load_arrays(path))
