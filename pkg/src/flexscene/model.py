"""End-to-end driving model: images + history -> waypoint-token logits."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffArray, Linear, Module, concat, cross_entropy, matmul, no_grad
from .autodiff.tensor import DTYPE
from .codec import HistoryEncoder, detokenize, discretize
from .config import RunConfig
from .encoder import KeyLayout, PositionalEmbeddings, SceneEncoder
from .patchify import Patchifier, Projection, resize_matrix
from .policy import PolicyHead, build_layout, build_mask, rollout


@dataclass
class Batch:
    clip_ids: list
    images: np.ndarray  # (B, C, T, H, W, 3)
    histories: np.ndarray  # (B, T, h_past, 4), step k in its own ego frame
    targets: np.ndarray  # (B, T, H) waypoint ids per step
    futures: np.ndarray  # (B, T, H, 2) metres per step

    def __len__(self):
        return len(self.clip_ids)


def make_batch(clips, cfg: RunConfig) -> Batch:
    vocab = cfg.vocab()
    T = cfg.timesteps
    futures = np.stack([c.step_futures for c in clips]).astype(np.float64)
    return Batch(
        clip_ids=[c.clip_id for c in clips],
        images=np.stack([c.images for c in clips]).astype(DTYPE),
        histories=np.stack([np.stack([c.history_at(k, cfg.history_len) for k in range(T)])
                            for c in clips]),
        targets=discretize(futures, vocab),
        futures=futures,
    )


class DrivingModel(Module):
    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        seed = cfg.seed
        C, T = cfg.cameras, cfg.timesteps
        self.vocab = cfg.vocab()
        self.patchifier = Patchifier(cfg.patchifier_config(), cfg.height, cfg.width, seed)
        if cfg.repr == "flex":
            self.pos_emb = PositionalEmbeddings(cfg.d_enc, C, seed)
            self.encoder = SceneEncoder(cfg.encoder_config(), C, T, seed)
            self.to_llm = Linear(cfg.d_enc, cfg.d_llm, seed, "to_llm")
        else:
            self.proj = Projection(cfg.d_enc, cfg.d_llm, seed)
        self.history = HistoryEncoder(cfg.history_len, cfg.d_llm, seed)
        self.layout = build_layout(cfg.mode, cfg.repr, T, cfg.scene_len(), cfg.horizon)
        self.mask = build_mask(self.layout)
        self.positions = self.layout.positions()
        self.policy = PolicyHead(self.vocab.vocab_size, cfg.d_llm, cfg.policy_layers,
                                 cfg.policy_heads, self.layout.max_position + 1, seed)
        self.assign_names()

    # ---- scene representation ----
    def encoder_grid(self) -> tuple:
        return tuple(self.cfg.flex_grid or self.patchifier.grid)

    def key_layout(self) -> KeyLayout:
        return KeyLayout(self.cfg.timesteps, self.cfg.cameras, self.encoder_grid())

    def image_tokens(self, images) -> DiffArray:
        """(B, C, T, H, W, 3) -> (B, T, C, N, d_enc) patch tokens."""
        x = np.asarray(images, dtype=DTYPE).transpose(0, 2, 1, 3, 4, 5)
        frozen = all(p.frozen for p in self.patchifier.parameters())
        with no_grad() if frozen else contextlib.nullcontext():
            return self.patchifier(x)

    def _resize(self, tok, target):
        src = self.patchifier.grid
        if target is None or tuple(target) == tuple(src):
            return tok
        return matmul(resize_matrix(src, tuple(target)), tok)

    def scene(self, images, record: list | None = None) -> DiffArray:
        """(B, T, scene_len, d_llm) per-timestep policy scene tokens."""
        cfg = self.cfg
        tok = self.image_tokens(images)
        B, T, C = tok.shape[:3]
        if cfg.repr == "flex":
            tok = self._resize(tok, cfg.flex_grid) + self.pos_emb.offsets(T)
            s = self.to_llm(self.encoder(tok, record))
            return s.reshape(B, T, cfg.K // T, cfg.d_llm)
        tok = self.proj(self._resize(tok, cfg.baseline_grid))
        cam = self.policy.tok.table[[self.vocab.camera_id(c) for c in range(C)]]
        tok = tok + cam.reshape(1, 1, C, 1, cfg.d_llm)
        return tok.reshape(B, T, -1, cfg.d_llm)

    # ---- packed sequence ----
    def _broadcast(self, x, B):
        return x + np.zeros((B,) + (1,) * (x.ndim), DTYPE) if x.ndim else x

    def assemble(self, scene, hist, fut_ids, layout=None) -> DiffArray:
        """(B, S, D) packed embeddings. ``hist``: (B, n_spans, 1, D); ``fut_ids``: (B, n_spans, H)."""
        layout = layout or self.layout
        B = scene.shape[0]
        steps = layout.supervised_steps()
        fut = self.policy.embed_ids(fut_ids)
        start = self._broadcast(self.policy.embed_ids([self.vocab.start_id]), B)
        end = self._broadcast(self.policy.embed_ids([self.vocab.end_id]), B)
        parts = []
        for s in layout.segments:
            if s.kind == "special":
                parts.append(start if s.start == 0 else end)
            elif s.kind in ("scene_chunk", "image_tokens"):
                parts.append(scene[:, s.timestep])
            elif s.kind == "history":
                parts.append(hist[:, steps.index(s.timestep)])
            else:
                parts.append(fut[:, steps.index(s.timestep)])
        return concat(parts, axis=1)

    def packed(self, batch: Batch):
        """Embeddings and target ids for ``batch`` under the model's layout."""
        steps = self.layout.supervised_steps()
        scene = self.scene(batch.images)
        hist = self.history(batch.histories[:, steps])
        targets = batch.targets[:, steps]
        return self.assemble(scene, hist, targets), targets

    def logits(self, batch: Batch, rows=None) -> DiffArray:
        x, _ = self.packed(batch)
        return self.policy(x, self.mask, self.positions, rows)

    def loss(self, batch: Batch) -> DiffArray:
        x, targets = self.packed(batch)
        logits = self.policy(x, self.mask, self.positions, self.layout.loss_rows())
        return cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(len(batch), -1))

    # ---- inference ----
    def prefix(self, images, histories):
        """Inference context ``[start, scene_0..T-1, history_T-1]`` and its positions."""
        scene = self.scene(images)
        B, T, c, D = scene.shape
        hist = self.history(histories[:, -1])
        start = self._broadcast(self.policy.embed_ids([self.vocab.start_id]), B)
        x = concat([start, scene.reshape(B, T * c, D), hist], axis=1)
        return x, self.positions_for_prefix(T * c)

    def positions_for_prefix(self, n_scene: int) -> np.ndarray:
        return np.arange(n_scene + 2)

    def sample(self, images, histories, k: int = 6, temperature: float = 1.0,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """(B, k, H, 2) waypoint trajectories; temperature 0 is greedy."""
        if k < 1:
            raise ValueError("k must be >= 1")
        with no_grad():
            x, pos = self.prefix(images, histories)
            B = x.shape[0]
            rep = DiffArray(np.repeat(x.data, k, axis=0))
            ids = rollout(self.policy, rep, pos, self.cfg.horizon, self.vocab.n_waypoints,
                          temperature, rng)
        return detokenize(ids, self.vocab).reshape(B, k, self.cfg.horizon, 2)


def sample_trajectories(model: DrivingModel, batch: Batch, k: int = 6, temperature: float = 1.0,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    return model.sample(batch.images, batch.histories, k, temperature, rng)
