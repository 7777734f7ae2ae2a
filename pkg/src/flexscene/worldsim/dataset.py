"""FLEXDATA dataset files.

Layout (little-endian)::

    b"FLEXDATA"  u32 version  u32 header_len  header (JSON world config)  u64 count
    count x { u64 payload_len, payload }

Each payload is a u32-length JSON record header (ids, scenario, camera ids,
array shapes) followed by the raw float32 arrays in ``_ARRAYS`` order.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .clip import Clip, WorldConfig

MAGIC = b"FLEXDATA"
VERSION = 1
_ARRAYS = ("images", "timestamps", "ego_states", "future", "step_futures", "destination")


class DatasetError(IOError):
    """Malformed or truncated dataset file."""

    def __init__(self, msg, record: int | None = None):
        super().__init__(msg if record is None else f"record {record}: {msg}")
        self.record = record


def encode_clip(clip: Clip) -> bytes:
    arrays = {k: np.ascontiguousarray(getattr(clip, k), dtype="<f4") for k in _ARRAYS}
    meta = {
        "clip_id": clip.clip_id,
        "seed": clip.seed,
        "scenario": clip.scenario,
        "camera_ids": list(clip.camera_ids),
        "shapes": {k: list(a.shape) for k, a in arrays.items()},
    }
    head = json.dumps(meta).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for k in _ARRAYS:
        buf.write(arrays[k].tobytes())
    return buf.getvalue()


def decode_clip(payload: bytes, record: int = 0) -> Clip:
    try:
        (n,) = struct.unpack_from("<I", payload, 0)
        meta = json.loads(payload[4:4 + n])
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"bad record header ({exc})", record) from exc
    off = 4 + n
    arrays = {}
    for k in _ARRAYS:
        shape = tuple(meta["shapes"][k])
        count = int(np.prod(shape, dtype=np.int64))
        if off + 4 * count > len(payload):
            raise DatasetError(f"payload too short for {k}", record)
        arrays[k] = np.frombuffer(payload, "<f4", count, off).reshape(shape).astype(np.float32)
        off += 4 * count
    return Clip(clip_id=meta["clip_id"], seed=meta["seed"], scenario=meta["scenario"],
                camera_ids=meta["camera_ids"], **arrays)


def write_dataset(clips, path, config: WorldConfig) -> int:
    """Write an iterable of clips; returns the record count."""
    path = Path(path)
    head = json.dumps(config.to_dict(), sort_keys=True).encode()
    n = 0
    tmp = path.with_suffix(path.suffix + ".partial")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        count_at = f.tell()
        f.write(struct.pack("<Q", 0))
        for clip in clips:
            payload = encode_clip(clip)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
            n += 1
        f.seek(count_at)
        f.write(struct.pack("<Q", n))
    os.replace(tmp, path)
    return n


def _read_header(f, path):
    magic = f.read(8)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    raw = f.read(8)
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated file header")
    version, hlen = struct.unpack("<II", raw)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    head = f.read(hlen)
    raw = f.read(8)
    if len(head) < hlen or len(raw) < 8:
        raise DatasetError(f"{path}: truncated file header")
    config = WorldConfig.from_dict(json.loads(head))
    (count,) = struct.unpack("<Q", raw)
    return config, count, head


def read_dataset(path):
    """Stream clips from a dataset file."""
    with open(path, "rb") as f:
        _, count, _ = _read_header(f, path)
        for i in range(count):
            raw = f.read(8)
            if len(raw) < 8:
                raise DatasetError("truncated before record length", i)
            (n,) = struct.unpack("<Q", raw)
            payload = f.read(n)
            if len(payload) < n:
                raise DatasetError(f"truncated payload ({len(payload)} of {n} bytes)", i)
            yield decode_clip(payload, i)


class ClipDataset:
    """Random-access view over a dataset file (record offsets indexed up front)."""

    def __init__(self, path):
        self.path = Path(path)
        offsets = []
        with open(self.path, "rb") as f:
            self.config, count, self._header = _read_header(f, path)
            pos = f.tell()
            size = self.path.stat().st_size
            for i in range(count):
                f.seek(pos)
                raw = f.read(8)
                if len(raw) < 8:
                    raise DatasetError("truncated before record length", i)
                (n,) = struct.unpack("<Q", raw)
                if pos + 8 + n > size:
                    raise DatasetError(f"truncated payload (file ends before {n} bytes)", i)
                offsets.append((pos + 8, n))
                pos += 8 + n
        self._offsets = offsets
        self._ids = None

    def __len__(self):
        return len(self._offsets)

    def __getitem__(self, i: int) -> Clip:
        off, n = self._offsets[i]
        with open(self.path, "rb") as f:
            f.seek(off)
            return decode_clip(f.read(n), i)

    def header_hash(self) -> str:
        """Content hash of the dataset header (config + record count)."""
        h = hashlib.sha256(self._header)
        h.update(struct.pack("<Q", len(self)))
        return h.hexdigest()[:16]

    def clip_ids(self) -> list:
        if self._ids is None:
            self._ids = [self[i].clip_id for i in range(len(self))]
        return self._ids

    def split(self, test_percent: int = 10):
        """Record indices of the (train, test) split by clip-id hash."""
        train, test = [], []
        for i, cid in enumerate(self.clip_ids()):
            (test if is_test_clip(cid, test_percent) else train).append(i)
        return train, test


def is_test_clip(clip_id: int, test_percent: int = 10) -> bool:
    digest = hashlib.sha256(f"clip-{clip_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % 100 < test_percent


def split_ids(clip_ids, test_percent: int = 10):
    train = [c for c in clip_ids if not is_test_clip(c, test_percent)]
    test = [c for c in clip_ids if is_test_clip(c, test_percent)]
    return train, test
