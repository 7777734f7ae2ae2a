"""Scene encoder: K learned scene tokens compress every image token of a clip."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Block, CrossBlock, DiffArray, LayerNorm, MLP, Module, Parameter, concat
from .autodiff.nn import init_uniform
from .autodiff.tensor import DTYPE, ShapeError
from .patchify import ConfigError, TokenGrid

VARIANTS = ("joint_self", "joint_cross", "per_image_self", "per_image_cross")


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 90
    layers: int = 4
    heads: int = 4
    d_enc: int = 64
    variant: str = "joint_self"

    def validate(self, cameras: int, timesteps: int) -> "EncoderConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K < 1 or self.layers < 0 or self.heads < 1 or self.d_enc % self.heads:
            raise ConfigError(f"invalid encoder sizes {asdict(self)}")
        if self.K % timesteps:
            raise ConfigError(f"K={self.K} not divisible by T={timesteps}")
        if self.variant.startswith("per_image") and self.K % (cameras * timesteps):
            raise ConfigError(f"K={self.K} not divisible by C*T={cameras * timesteps}")
        return self


@dataclass
class SceneTokens:
    values: DiffArray  # (..., K, d)

    @property
    def K(self) -> int:
        return self.values.shape[-2]

    @property
    def d_enc(self) -> int:
        return self.values.shape[-1]


def sinusoid(t, d: int) -> np.ndarray:
    """Fixed sin/cos features of integer timesteps, (len(t), d)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if d % 2:
        out = np.concatenate([out, np.zeros((len(t), 1))], axis=1)
    return out.astype(DTYPE)


class PositionalEmbeddings(Module):
    """time_embed: sinusoid -> Linear -> GELU -> Linear; cam_embed: learned table."""

    def __init__(self, d: int, cameras: int, seed: int, name: str = "pos"):
        self.d = d
        self.cameras = cameras
        self.time_mlp = MLP(d, d, d, seed, name + ".time")
        self.cam = Parameter(init_uniform((cameras, d), d, seed, name + ".cam"), name + ".cam")

    def time_embed(self, t) -> DiffArray:
        return self.time_mlp(sinusoid(t, self.d))

    def cam_embed(self, c) -> DiffArray:
        c = np.atleast_1d(np.asarray(c))
        if c.min() < 0 or c.max() >= self.cameras:
            raise ConfigError(f"camera id out of range [0, {self.cameras}): {c.tolist()}")
        return self.cam[c]

    def offsets(self, timesteps: int) -> DiffArray:
        """(T, C, 1, d) offsets for the (t, c) image grid."""
        te = self.time_embed(np.arange(timesteps)).reshape(timesteps, 1, 1, self.d)
        ce = self.cam.reshape(1, self.cameras, 1, self.d)
        return te + ce

    def zero_(self):
        for p in (self.time_mlp.fc2.weight, self.time_mlp.fc2.bias, self.cam):
            p.data[...] = 0.0


def add_positional(grid: TokenGrid, pe: PositionalEmbeddings) -> TokenGrid:
    if grid.camera_id is None or grid.timestep_index is None:
        raise ValueError("grid must carry camera_id and timestep_index")
    off = pe.time_embed(grid.timestep_index) + pe.cam_embed(grid.camera_id)
    return TokenGrid(grid.tokens + off, grid.grid, grid.camera_id, grid.timestep_index)


@dataclass(frozen=True)
class KeyLayout:
    """Ordering of image-token keys: (timestep, camera, patch row, patch col), row-major."""

    timesteps: int
    cameras: int
    grid: tuple

    @property
    def per_image(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def size(self) -> int:
        return self.timesteps * self.cameras * self.per_image

    def decode(self, key: int) -> tuple:
        """Key index -> (camera, timestep, row, col)."""
        if not 0 <= key < self.size:
            raise IndexError(f"key {key} outside [0, {self.size})")
        t, rem = divmod(int(key), self.cameras * self.per_image)
        c, n = divmod(rem, self.per_image)
        r, col = divmod(n, self.grid[1])
        return c, t, r, col

    def image_slice(self, c: int, t: int) -> slice:
        start = (t * self.cameras + c) * self.per_image
        return slice(start, start + self.per_image)


def stack_grids(grids, cameras: int, timesteps: int) -> np.ndarray:
    """Place tagged grids on a (T, C) index table; every slot must be filled once."""
    table = np.full((timesteps, cameras), -1)
    for i, g in enumerate(grids):
        if g.camera_id is None or g.timestep_index is None:
            raise ValueError("grids must carry camera_id and timestep_index")
        if table[g.timestep_index, g.camera_id] != -1:
            raise ValueError(f"duplicate grid for (t={g.timestep_index}, c={g.camera_id})")
        table[g.timestep_index, g.camera_id] = i
    if (table < 0).any():
        raise ValueError("missing grids for some (timestep, camera)")
    return table


class SceneEncoder(Module):
    """Batched forward over image tokens laid out as (B, T, C, N, d)."""

    def __init__(self, cfg: EncoderConfig, cameras: int, timesteps: int, seed: int,
                 name: str = "encoder"):
        self.cfg = cfg.validate(cameras, timesteps)
        self.cameras, self.timesteps = cameras, timesteps
        d = cfg.d_enc
        self.scene_init = Parameter(init_uniform((cfg.K, d), d, seed, name + ".scene_init"),
                                    name + ".scene_init")
        blk = CrossBlock if cfg.variant.endswith("cross") else Block
        self.blocks = [blk(d, cfg.heads, seed, f"{name}.blocks.{i}") for i in range(cfg.layers)]
        self.norm = LayerNorm(d, name + ".norm")

    @property
    def per_image_k(self) -> int:
        return self.cfg.K // (self.cameras * self.timesteps)

    def __call__(self, x, record: list | None = None) -> DiffArray:
        """(B, T, C, N, d) positioned image tokens -> (B, K, d) scene tokens.

        When ``record`` is a list, the final layer's scene->image attention
        weights (B, heads, K, T*C*N) are appended to it.
        """
        if x.ndim != 5 or x.shape[1:3] != (self.timesteps, self.cameras):
            raise ShapeError(f"expected (B, {self.timesteps}, {self.cameras}, N, d), got {x.shape}")
        B, T, C, N, d = x.shape
        K = self.cfg.K
        v = self.cfg.variant
        if record is not None and v.startswith("per_image"):
            raise ValueError(f"variant {v} has no joint scene->image attention to record")
        if v.startswith("per_image"):
            k = self.per_image_k
            s = (self.scene_init.reshape(T * C, k, d) + np.zeros((B, 1, 1, 1), DTYPE))
            s = s.reshape(B * T * C, k, d)
            img = x.reshape(B * T * C, N, d)
            out = self._run(s, img, v.endswith("cross"), None)
            return self.norm(out.reshape(B, K, d))
        s = self.scene_init + np.zeros((B, 1, 1), DTYPE)
        img = x.reshape(B, T * C * N, d)
        out = self._run(s, img, v.endswith("cross"), record)
        return self.norm(out)

    def _run(self, s, img, cross: bool, record):
        k = s.shape[-2]
        last = self.blocks[-1].attn if self.blocks else None
        if record is not None and last is not None:
            last.record = []
        try:
            if cross:
                for blk in self.blocks:
                    s = blk(s, img)
                out = s
            else:
                seq = concat([s, img], axis=1)
                for blk in self.blocks:
                    seq = blk(seq)
                out = seq[:, :k]
        finally:
            if record is not None and last is not None:
                w = last.record[-1]
                last.record = None
                record.append(w if cross else w[:, :, :k, k:])
        return out

    def encode(self, grids) -> SceneTokens:
        """Encode one clip given its C*T (positioned) TokenGrids."""
        return SceneTokens(self(self._stack(grids))[0])

    def attention_record(self, grids) -> np.ndarray:
        """Final-layer (heads, K, C*T*N) scene->image weights for one clip."""
        rec = []
        self(self._stack(grids), record=rec)
        return rec[0][0]

    def _stack(self, grids):
        grids = list(grids)
        table = stack_grids(grids, self.cameras, self.timesteps)
        rows = [grids[i].tokens for i in table.reshape(-1)]
        n, d = rows[0].shape
        return concat(rows, axis=0).reshape(1, self.timesteps, self.cameras, n, d)


def encode(grids, encoder: SceneEncoder) -> SceneTokens:
    return encoder.encode(grids)


def attention_record(grids, encoder: SceneEncoder) -> np.ndarray:
    return encoder.attention_record(grids)


# ---- FLEXATTN dumps -------------------------------------------------------

ATTN_MAGIC = b"FLEXATTN"
ATTN_VERSION = 1


class AttentionDumpError(IOError):
    pass


def save_attention(path, weights: np.ndarray, layout: KeyLayout, clip_ids) -> None:
    """Write (clips, heads, K, M) final-layer weights plus their key layout.

    Layout: magic, u32 version, u32 rank, rank x u64 extents, u32 meta length,
    JSON meta (key layout, clip ids), raw little-endian f32 payload.
    """
    w = np.ascontiguousarray(weights, dtype="<f4")
    if w.ndim != 4 or w.shape[-1] != layout.size or w.shape[0] != len(clip_ids):
        raise ShapeError(f"weights {w.shape} inconsistent with layout size {layout.size}"
                         f" and {len(clip_ids)} clips")
    meta = json.dumps({"timesteps": layout.timesteps, "cameras": layout.cameras,
                       "grid": list(layout.grid), "clip_ids": [int(c) for c in clip_ids]}).encode()
    with open(path, "wb") as f:
        f.write(ATTN_MAGIC)
        f.write(struct.pack("<II", ATTN_VERSION, w.ndim))
        f.write(struct.pack(f"<{w.ndim}Q", *w.shape))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(w.tobytes())


def load_attention(path):
    """-> (weights (clips, heads, K, M), KeyLayout, clip_ids)."""
    path = Path(path)
    if not path.exists():
        raise AttentionDumpError(f"attention dump not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != ATTN_MAGIC:
        raise AttentionDumpError(f"{path}: bad magic")
    try:
        version, rank = struct.unpack_from("<II", raw, 8)
        if version != ATTN_VERSION:
            raise AttentionDumpError(f"{path}: unsupported version {version}")
        shape = struct.unpack_from(f"<{rank}Q", raw, 16)
        off = 16 + 8 * rank
        (mlen,) = struct.unpack_from("<I", raw, off)
        meta = json.loads(raw[off + 4: off + 4 + mlen])
    except (struct.error, ValueError) as exc:
        raise AttentionDumpError(f"{path}: truncated header ({exc})") from exc
    off += 4 + mlen
    count = int(np.prod(shape))
    if len(raw) - off < 4 * count:
        raise AttentionDumpError(f"{path}: truncated payload")
    w = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
    layout = KeyLayout(meta["timesteps"], meta["cameras"], tuple(meta["grid"]))
    return w, layout, meta["clip_ids"]
