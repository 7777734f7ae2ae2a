"""Image -> visual tokens, token-grid resizing, and the concatenated baseline scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Block, DiffArray, Linear, Module, MLP, Parameter, concat, matmul
from .autodiff.nn import init_uniform
from .autodiff.tensor import DTYPE, ShapeError


class ConfigError(ValueError):
    pass


@dataclass
class TokenGrid:
    tokens: DiffArray  # (N, d)
    grid: tuple  # (rows, cols)
    camera_id: int | None = None
    timestep_index: int | None = None

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols != self.tokens.shape[-2]:
            raise ShapeError(f"grid {self.grid} does not hold {self.tokens.shape[-2]} tokens")

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class PatchifierConfig:
    patch_size: int = 8
    d_enc: int = 64
    depth: int = 0
    heads: int = 4
    frozen_stage1: bool = True

    def grid_for(self, height: int, width: int) -> tuple:
        p = self.patch_size
        if height % p or width % p:
            raise ConfigError(f"image {height}x{width} not divisible by patch size {p}")
        return height // p, width // p


class Patchifier(Module):
    """Linear patch embedding + learned patch-position table + optional ViT blocks."""

    def __init__(self, cfg: PatchifierConfig, height: int, width: int, seed: int,
                 name: str = "patchifier"):
        self.cfg = cfg
        self.grid = cfg.grid_for(height, width)
        n = self.grid[0] * self.grid[1]
        fan_in = cfg.patch_size * cfg.patch_size * 3
        self.embed = Linear(fan_in, cfg.d_enc, seed, name + ".embed")
        self.pos = Parameter(init_uniform((n, cfg.d_enc), cfg.d_enc, seed, name + ".pos"),
                             name + ".pos")
        self.blocks = [Block(cfg.d_enc, cfg.heads, seed, f"{name}.blocks.{i}")
                       for i in range(cfg.depth)]

    def patches(self, images: np.ndarray) -> np.ndarray:
        """(..., H, W, 3) -> (..., N, p*p*3), patches in row-major grid order."""
        p = self.cfg.patch_size
        *lead, h, w, ch = images.shape
        self.cfg.grid_for(h, w)
        x = images.reshape(*lead, h // p, p, w // p, p, ch)
        nd = len(lead)
        x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
        return x.reshape(*lead, (h // p) * (w // p), p * p * ch)

    def __call__(self, images) -> DiffArray:
        x = self.embed(self.patches(np.asarray(images, dtype=DTYPE))) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return x


def patchify(image, patchifier: Patchifier, camera_id: int | None = None,
             timestep_index: int | None = None) -> TokenGrid:
    """Tokenise one (H, W, 3) image."""
    tokens = patchifier(np.asarray(image)[None])[0]
    return TokenGrid(tokens, patchifier.grid, camera_id, timestep_index)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) 1-D bilinear weights, half-pixel centres, edge-clamped."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        x = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1)
        lo = int(np.floor(x))
        hi = min(lo + 1, src - 1)
        frac = x - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_matrix(src: tuple, dst: tuple) -> np.ndarray:
    """(N_dst, N_src) operator resizing a row-major token grid."""
    if dst[0] < 1 or dst[1] < 1:
        raise ShapeError(f"target grid must be at least 1x1, got {dst}")
    return np.kron(bilinear_matrix(src[0], dst[0]), bilinear_matrix(src[1], dst[1])).astype(DTYPE)


def resize_token_array(tokens: DiffArray, src: tuple, dst: tuple) -> DiffArray:
    if tuple(src) == tuple(dst):
        return tokens
    return matmul(resize_matrix(src, dst), tokens)


def resize_tokens(grid: TokenGrid, target: tuple) -> TokenGrid:
    """Bilinear resize of the 2-D token grid, per channel; differentiable."""
    out = resize_token_array(grid.tokens, grid.grid, tuple(target))
    return TokenGrid(out, tuple(target), grid.camera_id, grid.timestep_index)


class Projection(MLP):
    """Two-layer projector from encoder width to policy width."""

    def __init__(self, d_enc: int, d_llm: int, seed: int, name: str = "proj"):
        super().__init__(d_enc, d_llm, d_llm, seed, name)


def project(tokens, proj: Projection) -> DiffArray:
    return proj(tokens)


def baseline_scene(grids, proj: Projection | None = None) -> DiffArray:
    """Concatenate all (resized) image tokens ordered by (timestep, camera).

    Applies ``proj`` to every grid first when given.
    """
    grids = list(grids)
    sizes = {g.n for g in grids}
    if len(sizes) > 1:
        raise ShapeError(f"inconsistent tokens per image: {sorted(sizes)}")
    if any(g.camera_id is None or g.timestep_index is None for g in grids):
        raise ValueError("baseline_scene needs camera and timestep tags on every grid")
    ordered = sorted(grids, key=lambda g: (g.timestep_index, g.camera_id))
    parts = [proj(g.tokens) if proj is not None else g.tokens for g in ordered]
    return concat(parts, axis=0)
