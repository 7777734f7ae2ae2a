"""Waypoint vocabulary and the single-token history encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import DiffArray, MLP
from .autodiff.tensor import DTYPE, ShapeError

SPECIALS = ("start", "end") + tuple(f"cam_{i}" for i in range(7))


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class WaypointVocab:
    x_bins: int = 32
    y_bins: int = 32
    x_range: tuple = (-5.0, 40.0)
    y_range: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if self.x_bins < 1 or self.y_bins < 1:
            raise VocabError("bin counts must be positive")
        if not (self.x_range[0] < self.x_range[1] and self.y_range[0] < self.y_range[1]):
            raise VocabError("ranges must be increasing")

    @property
    def n_waypoints(self) -> int:
        return self.x_bins * self.y_bins

    @property
    def vocab_size(self) -> int:
        return self.n_waypoints + len(SPECIALS)

    def special(self, name: str) -> int:
        return self.n_waypoints + SPECIALS.index(name)

    @property
    def start_id(self) -> int:
        return self.special("start")

    @property
    def end_id(self) -> int:
        return self.special("end")

    def camera_id(self, c: int) -> int:
        return self.special(f"cam_{c}")

    @property
    def bin_width(self) -> tuple:
        return ((self.x_range[1] - self.x_range[0]) / self.x_bins,
                (self.y_range[1] - self.y_range[0]) / self.y_bins)

    def x_edges(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.x_bins + 1)

    def y_edges(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.y_bins + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x_range"], d["y_range"] = list(self.x_range), list(self.y_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WaypointVocab":
        return cls(d["x_bins"], d["y_bins"], tuple(d["x_range"]), tuple(d["y_range"]))


def _bin(v, edges):
    # searchsorted on the edges themselves; floor((v - lo) / w) misbins points next to an edge
    return np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2).astype(np.int64)


def discretize(waypoints, vocab: WaypointVocab) -> np.ndarray:
    """(..., 2) ego-frame points -> (...,) token ids; out-of-range values clamp."""
    p = np.asarray(waypoints, dtype=np.float64)
    if p.shape[-1] != 2:
        raise ShapeError(f"waypoints need a trailing axis of 2, got {p.shape}")
    xb = _bin(p[..., 0], vocab.x_edges())
    yb = _bin(p[..., 1], vocab.y_edges())
    return xb * vocab.y_bins + yb


def detokenize(ids, vocab: WaypointVocab) -> np.ndarray:
    """Token ids -> bin-centre waypoints (..., 2)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab.n_waypoints):
        raise VocabError(f"ids outside the waypoint vocabulary [0, {vocab.n_waypoints})")
    wx, wy = vocab.bin_width
    xb, yb = np.divmod(ids, vocab.y_bins)
    return np.stack([vocab.x_range[0] + (xb + 0.5) * wx,
                     vocab.y_range[0] + (yb + 0.5) * wy], axis=-1)


# (x, y, heading, speed) divisors keeping inputs O(1)
HISTORY_SCALE = np.array([10.0, 10.0, 1.0, 10.0], dtype=DTYPE)


class HistoryEncoder(MLP):
    """Flattened (h_past, 4) ego states -> one D_llm token."""

    def __init__(self, h_past: int, d_llm: int, seed: int, name: str = "history"):
        super().__init__(h_past * 4, d_llm, d_llm, seed, name)
        self.h_past = h_past

    def __call__(self, states) -> DiffArray:
        s = np.asarray(states, dtype=DTYPE)
        if s.shape[-2:] != (self.h_past, 4):
            raise ShapeError(f"history must end in ({self.h_past}, 4), got {s.shape}")
        flat = (s / HISTORY_SCALE).reshape(*s.shape[:-2], 1, self.h_past * 4)
        return super().__call__(flat)


def encode_history(states, encoder: HistoryEncoder) -> DiffArray:
    """(h_past, 4) -> (1, D_llm)."""
    return encoder(states)
