"""Packed policy sequence: layouts, the interleaved mask, the decoder and sampling.

Timesteps are 0-based. Every token carries a *logical* position id that
depends only on (segment kind, timestep, offset), so a row of the packed
interleaved sequence sees exactly the same positions as it would in the
physically truncated prefix ``[start, scene_0..k, history_k, future_k]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Block, DiffArray, Embedding, LayerNorm, Linear, Module, Parameter, no_grad
from .autodiff.nn import init_uniform
from .autodiff.tensor import DTYPE, ShapeError, concat

MODES = ("interleaved", "non_interleaved")
REPRS = ("flex", "baseline")
KINDS = ("special", "scene_chunk", "image_tokens", "history", "future")


class LayoutError(ValueError):
    pass


def partition_chunks(scene, timesteps: int) -> list:
    """Split the (..., K, D) scene rows into T order-preserving chunks of K/T rows."""
    K = scene.shape[-2]
    if timesteps < 1 or K % timesteps:
        raise LayoutError(f"K={K} not divisible by T={timesteps}")
    c = K // timesteps
    return [scene[..., i * c:(i + 1) * c, :] for i in range(timesteps)]


@dataclass(frozen=True)
class Segment:
    kind: str
    timestep: int | None
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SequenceLayout:
    mode: str
    repr: str
    timesteps: int
    scene_len: int  # tokens per scene/image segment
    horizon: int
    segments: tuple

    @property
    def total_len(self) -> int:
        return self.segments[-1].stop

    @property
    def scene_kind(self) -> str:
        return "scene_chunk" if self.repr == "flex" else "image_tokens"

    def find(self, kind: str, timestep: int | None = None) -> Segment:
        for s in self.segments:
            if s.kind == kind and s.timestep == timestep:
                return s
        raise KeyError((kind, timestep))

    def supervised_steps(self) -> list:
        return [s.timestep for s in self.segments if s.kind == "future"]

    def positions(self) -> np.ndarray:
        """Logical position id of every token."""
        c, T, H = self.scene_len, self.timesteps, self.horizon
        pos = np.zeros(self.total_len, dtype=np.int64)
        for s in self.segments:
            if s.kind == "special":
                base = 0 if s.start == 0 else 2 + T * c + H
            elif s.kind in ("scene_chunk", "image_tokens"):
                base = 1 + s.timestep * c
            elif s.kind == "history":
                base = 1 + (s.timestep + 1) * c
            else:
                base = 2 + (s.timestep + 1) * c
            pos[s.start:s.stop] = base + np.arange(s.length)
        return pos

    @property
    def max_position(self) -> int:
        return 2 + self.timesteps * self.scene_len + self.horizon

    def loss_rows(self) -> np.ndarray:
        """Rows whose logits predict future tokens, span by span (history row
        predicts waypoint 0, future row i predicts waypoint i+1)."""
        rows = []
        for k in self.supervised_steps():
            h, f = self.find("history", k), self.find("future", k)
            rows.append([h.start] + list(range(f.start, f.stop - 1)))
        return np.asarray(rows, dtype=np.int64).reshape(-1)

    def validate(self) -> "SequenceLayout":
        pos = 0
        for s in self.segments:
            if s.kind not in KINDS or s.start != pos or s.length < 1:
                raise LayoutError(f"segments must be contiguous and non-empty; bad {s}")
            pos = s.stop
        T = self.timesteps
        scenes = [s for s in self.segments if s.kind in ("scene_chunk", "image_tokens")]
        hists = [s for s in self.segments if s.kind == "history"]
        futs = [s for s in self.segments if s.kind == "future"]
        want = T if self.mode == "interleaved" else 1
        if len(scenes) != T or len(hists) != want or len(futs) != want:
            raise LayoutError(f"{self.mode} layout needs {T} scene, {want} history and "
                              f"{want} future segments")
        for h in hists:
            f = self.find("future", h.timestep)
            sc = self.find(self.scene_kind, h.timestep)
            if not sc.stop <= h.start < f.start:
                raise LayoutError(f"timestep {h.timestep}: scene/history/future out of order")
        return self


def build_layout(mode: str, repr: str, timesteps: int, scene_len: int, horizon: int) -> SequenceLayout:
    """``scene_len`` is K/T (flex) or N'*C (baseline) tokens per timestep."""
    if mode not in MODES or repr not in REPRS:
        raise LayoutError(f"mode must be in {MODES} and repr in {REPRS}")
    kind = "scene_chunk" if repr == "flex" else "image_tokens"
    segs, pos = [], 0

    def add(k, t, n):
        nonlocal pos
        segs.append(Segment(k, t, pos, n))
        pos += n

    add("special", None, 1)
    for t in range(timesteps):
        add(kind, t, scene_len)
        if mode == "interleaved":
            add("history", t, 1)
            add("future", t, horizon)
    if mode == "non_interleaved":
        add("history", timesteps - 1, 1)
        add("future", timesteps - 1, horizon)
    add("special", None, 1)
    return SequenceLayout(mode, repr, timesteps, scene_len, horizon, tuple(segs)).validate()


def build_mask(layout: SequenceLayout) -> np.ndarray:
    """(S, S) allow-matrix for any layout.

    History/future queries of step k see the start token, scene segments of
    steps <= k, and their own step's history and causal future prefix. Scene
    queries see specials and scene segments of steps <= k. Specials see every
    earlier position. Everything is causal in physical order.
    """
    layout.validate()
    S = layout.total_len
    kind = np.empty(S, dtype=np.int64)
    step = np.full(S, -1, dtype=np.int64)
    code = {"special": 0, "scene_chunk": 1, "image_tokens": 1, "history": 2, "future": 2}
    for s in layout.segments:
        kind[s.start:s.stop] = code[s.kind]
        if s.timestep is not None:
            step[s.start:s.stop] = s.timestep
    qk, kk = kind[:, None], kind[None, :]
    qs, ks = step[:, None], step[None, :]
    causal = np.tril(np.ones((S, S), dtype=bool))
    scene_or_special_q = (qk <= 1) & ((kk == 0) | ((kk == 1) & (ks <= qs)))
    traj_q = (qk == 2) & ((kk == 0) | ((kk == 1) & (ks <= qs)) | ((kk == 2) & (ks == qs)))
    special_q = qk == 0
    mask = causal & (scene_or_special_q | traj_q | special_q)
    if not mask.any(axis=1).all():
        raise LayoutError("mask has a fully masked row")
    return mask


def build_interleaved_mask(layout: SequenceLayout) -> np.ndarray:
    if layout.mode != "interleaved":
        raise LayoutError("build_interleaved_mask needs an interleaved layout")
    return build_mask(layout)


def prefix_rows(layout: SequenceLayout, k: int) -> np.ndarray:
    """Physical indices of ``[start, scene_0..k, history_k, future_k]`` in ``layout``."""
    parts = [np.arange(1)]
    for t in range(k + 1):
        s = layout.find(layout.scene_kind, t)
        parts.append(np.arange(s.start, s.stop))
    for kind in ("history", "future"):
        s = layout.find(kind, k)
        parts.append(np.arange(s.start, s.stop))
    return np.concatenate(parts)


class PolicyHead(Module):
    """Pre-norm decoder over packed sequences with learned position embeddings."""

    def __init__(self, vocab_size: int, d: int, layers: int, heads: int, max_positions: int,
                 seed: int, name: str = "policy"):
        self.vocab_size = vocab_size
        self.d = d
        self.tok = Embedding(vocab_size, d, seed, name + ".tok")
        self.pos = Parameter(init_uniform((max_positions, d), d, seed, name + ".pos"), name + ".pos")
        self.blocks = [Block(d, heads, seed, f"{name}.blocks.{i}") for i in range(layers)]
        self.norm = LayerNorm(d, name + ".norm")
        self.head = Linear(d, vocab_size, seed, name + ".head")

    @property
    def max_positions(self) -> int:
        return self.pos.shape[0]

    def __call__(self, x, mask, positions, rows=None) -> DiffArray:
        """(B, S, D) embeddings -> (B, S, V) logits, or (B, len(rows), V) when ``rows`` is given."""
        S = x.shape[-2]
        positions = np.asarray(positions)
        mask = np.asarray(mask, dtype=bool)
        if x.shape[-1] != self.d:
            raise ShapeError(f"embedding width {x.shape[-1]} != {self.d}")
        if mask.shape != (S, S) or positions.shape != (S,):
            raise ShapeError(f"mask {mask.shape} / positions {positions.shape} vs length {S}")
        if positions.max() >= self.max_positions:
            raise ShapeError(f"position {positions.max()} exceeds table size {self.max_positions}")
        h = x + self.pos[positions]
        for blk in self.blocks:
            h = blk(h, mask)
        if rows is not None:
            h = h[:, np.asarray(rows)]
        return self.head(self.norm(h))

    def embed_ids(self, ids) -> DiffArray:
        return self.tok(np.asarray(ids))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def sample_ids(logits: np.ndarray, n_waypoints: int, temperature: float,
               rng: np.random.Generator | None) -> np.ndarray:
    """Draw one waypoint id per row of (R, V) logits; specials are never drawn."""
    z = logits[:, :n_waypoints].astype(np.float64)
    if temperature <= 0:
        return z.argmax(axis=1)
    z = z / temperature
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(z))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), n_waypoints - 1)


def rollout(policy: PolicyHead, prefix: DiffArray, prefix_positions: np.ndarray, horizon: int,
            n_waypoints: int, temperature: float = 0.0, rng=None) -> np.ndarray:
    """Autoregressively extend (R, P, D) prefix embeddings by ``horizon`` waypoint ids.

    The prefix ends at a history token; appended tokens take consecutive
    logical positions after it. Returns (R, horizon) ids.
    """
    if temperature > 0 and rng is None:
        raise ValueError("temperature sampling needs an rng")
    R = prefix.shape[0]
    ids = np.zeros((R, horizon), dtype=np.int64)
    base = int(prefix_positions[-1]) + 1
    with no_grad():
        seq = prefix
        pos = np.asarray(prefix_positions)
        for i in range(horizon):
            S = seq.shape[1]
            logits = policy(seq, causal_mask(S), pos, rows=[S - 1]).data[:, 0]
            ids[:, i] = sample_ids(logits, n_waypoints, temperature, rng)
            if i + 1 < horizon:
                seq = concat([seq, policy.embed_ids(ids[:, i:i + 1])], axis=1)
                pos = np.append(pos, base + i)
    return ids


def write_trajectories_csv(path, clip_ids, trajectories) -> None:
    """(B, k, H, 2) trajectories -> rows clip_id, sample_idx, step, x, y."""
    tr = np.asarray(trajectories)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip_id", "sample_idx", "step", "x", "y"])
        for b, cid in enumerate(clip_ids):
            for s in range(tr.shape[1]):
                for h in range(tr.shape[2]):
                    w.writerow([int(cid), s, h, f"{tr[b, s, h, 0]:.6f}", f"{tr[b, s, h, 1]:.6f}"])
