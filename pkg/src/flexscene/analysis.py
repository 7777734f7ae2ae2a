"""Per-scene-token attention responses, sorted response curves, heat grids and the
destination-localisation probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .encoder import KeyLayout


@dataclass(frozen=True)
class TokenResponse:
    token_index: int
    max_response: float
    argmax_key: tuple  # (camera, timestep, patch row, patch col)
    rank: int  # 0 = strongest


def response_arrays(attn) -> tuple:
    """(heads, K, M) weights -> per-token (max over keys of the head mean, argmax key)."""
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"attention must be (heads, K, M), got {a.shape}")
    mean = a.mean(axis=0)
    return mean.max(axis=1), mean.argmax(axis=1)


def ranks_of(values) -> np.ndarray:
    """Rank of every entry under a stable descending sort."""
    order = np.argsort(-np.asarray(values), kind="stable")
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(len(order))
    return ranks


def token_responses(attn, layout: KeyLayout) -> list:
    a = np.asarray(attn)
    if a.ndim != 3 or a.shape[-1] != layout.size:
        raise ValueError(f"attention {a.shape} does not match {layout.size} image-token keys")
    mx, arg = response_arrays(a)
    ranks = ranks_of(mx)
    return [TokenResponse(i, float(mx[i]), layout.decode(int(arg[i])), int(ranks[i]))
            for i in range(len(mx))]


def mean_responses(attn_batch) -> np.ndarray:
    """(clips, heads, K, M) -> per-token mean over clips of the max response."""
    return np.mean([response_arrays(a)[0] for a in attn_batch], axis=0)


def sorted_response_curve(per_clip_responses) -> np.ndarray:
    """(clips, K) max responses -> descending K-curve of the per-token clip mean."""
    r = np.atleast_2d(np.asarray(per_clip_responses, dtype=np.float64))
    if r.shape[0] < 1:
        raise ValueError("need at least one clip")
    return np.sort(r.mean(axis=0))[::-1]


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "mean_max_response"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


def write_responses_csv(path, mean_max) -> None:
    ranks = ranks_of(mean_max)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["token_index", "mean_max_response", "rank"])
        for i, v in enumerate(mean_max):
            w.writerow([i, repr(float(v)), int(ranks[i])])


def response_map(token_index: int, attn, layout: KeyLayout) -> dict:
    """(camera, timestep) -> (rows, cols) head-mean attention grid of one scene token."""
    a = np.asarray(attn, dtype=np.float64)
    if not 0 <= token_index < a.shape[1]:
        raise IndexError(f"token {token_index} outside [0, {a.shape[1]})")
    row = a[:, token_index].mean(axis=0)
    return {(c, t): row[layout.image_slice(c, t)].reshape(layout.grid)
            for t in range(layout.timesteps) for c in range(layout.cameras)}


def write_pgm(path, grid, scale: float | None = None) -> None:
    """ASCII (P2) greyscale image; values scaled so the grid maximum is 255."""
    g = np.asarray(grid, dtype=np.float64)
    top = g.max() if scale is None else scale
    px = np.zeros(g.shape, dtype=np.int64) if top <= 0 else np.clip(np.rint(g / top * 255), 0, 255).astype(np.int64)
    with open(path, "w") as f:
        f.write(f"P2\n{g.shape[1]} {g.shape[0]}\n255\n")
        for r in px:
            f.write(" ".join(str(v) for v in r) + "\n")


def write_grid_csv(path, grid) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), delimiter=",", fmt="%.9g")


def read_pgm(path) -> np.ndarray:
    tok = open(path).read().split()
    if tok[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h = int(tok[1]), int(tok[2])
    return np.array([int(v) for v in tok[4:4 + w * h]]).reshape(h, w)


# ---- destination localisation ------------------------------------------------

def marker_patch(clip, c: int, t: int, height: int, width: int, grid: tuple):
    """Patch (row, col) holding the destination marker in image (c, t), or None if off-image."""
    r, col = clip.marker_pixel(c, t, height, width)
    if not (0 <= r < height and 0 <= col < width):
        return None
    return int(r * grid[0] / height), int(col * grid[1] / width)


def localization_hit(clip, key: tuple, height: int, width: int, grid: tuple, radius: int = 1) -> bool:
    """Does an argmax key (c, t, row, col) fall within ``radius`` patches of the marker?"""
    c, t, r, col = key
    m = marker_patch(clip, c, t, height, width, grid)
    return m is not None and abs(m[0] - r) <= radius and abs(m[1] - col) <= radius


def top_token_key(attn, layout: KeyLayout) -> tuple:
    """Argmax key of the rank-0 scene token."""
    mx, arg = response_arrays(attn)
    return layout.decode(int(arg[int(np.argmax(mx))]))
