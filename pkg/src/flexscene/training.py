"""Two-stage training loop, run manifests, metrics logs and resumable checkpoints."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamW, DiffArray, cross_entropy, lr_schedule
from .autodiff.checkpoint import load_arrays, save_arrays
from .config import RunConfig
from .model import Batch, DrivingModel, make_batch
from .policy import SequenceLayout
from .worldsim.dataset import is_test_clip


class TrainingError(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


def interleaved_loss(logits, layout: SequenceLayout, targets) -> DiffArray:
    """Mean cross-entropy over every supervised future position.

    ``logits``: (B, S, V) for the full packed sequence, or (B, R, V) already
    gathered at ``layout.loss_rows()``. ``targets``: (B, n_spans, H) ids for
    the layout's supervised steps, or (B, T, H) per-step ids from which the
    supervised steps are picked.
    """
    targets = np.asarray(targets)
    rows = layout.loss_rows()
    steps = layout.supervised_steps()
    H = layout.horizon
    if targets.ndim != 3 or targets.shape[-1] != H:
        raise AlignmentError(f"targets must be (B, spans, {H}), got {targets.shape}")
    if targets.shape[1] == layout.timesteps and len(steps) != layout.timesteps:
        targets = targets[:, steps]
    if targets.shape[1] != len(steps):
        raise AlignmentError(f"{targets.shape[1]} target spans vs {len(steps)} supervised spans")
    if logits.shape[1] == layout.total_len:
        logits = logits[:, rows]
    elif logits.shape[1] != len(rows):
        raise AlignmentError(f"logits length {logits.shape[1]} matches neither the layout "
                             f"({layout.total_len}) nor its loss rows ({len(rows)})")
    if logits.shape[0] != targets.shape[0]:
        raise AlignmentError("batch sizes differ between logits and targets")
    return cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


# ---- data access -----------------------------------------------------------

def split_indices(source, test_percent: int = 10):
    """(train, test) record indices of a ClipDataset or clip list, by clip-id hash."""
    ids = source.clip_ids() if hasattr(source, "clip_ids") else [c.clip_id for c in source]
    train = [i for i, c in enumerate(ids) if not is_test_clip(c, test_percent)]
    test = [i for i, c in enumerate(ids) if is_test_clip(c, test_percent)]
    return train, test


def batch_indices(seed: int, step: int, pool, batch_size: int) -> list:
    """Minibatch for a global step; a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, 0x7A, step])
    replace = len(pool) < batch_size
    return [pool[i] for i in rng.choice(len(pool), batch_size, replace=replace)]


# ---- checkpoints / manifests ----------------------------------------------

def save_training_state(path, model: DrivingModel, opt: AdamW, step: int) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"optim/{k}": v for k, v in opt.state().items()})
    arrays["train/step"] = np.array([step], np.float32)
    save_arrays(path, arrays)


def load_training_state(path, model: DrivingModel):
    """Restore parameters; returns (global step, optimizer state dict)."""
    arrays = load_arrays(path)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    opt = {k[6:]: v for k, v in arrays.items() if k.startswith("optim/")}
    return int(arrays["train/step"][0]), opt


def write_manifest(out_dir, command: str, cfg: RunConfig, dataset_hash: str | None = None,
                   extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(),
                "config_hash": cfg.hash(), "dataset_header_hash": dataset_hash}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class TrainResult:
    model: DrivingModel
    losses: list = field(default_factory=list)  # (global step, loss)
    checkpoints: list = field(default_factory=list)


class Trainer:
    """Stage 1: patchifier frozen, warmup + cosine to ``lr1``. Stage 2: all
    parameters at constant ``lr2``. Global steps run 0..stage1+stage2-1."""

    def __init__(self, cfg: RunConfig, source, train_indices=None, out_dir=None,
                 log_every: int = 1):
        self.cfg = cfg.validate()
        self.source = source
        self.pool = list(train_indices) if train_indices is not None else split_indices(source)[0]
        if not self.pool:
            raise TrainingError("training split is empty")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_every = log_every
        self.model = DrivingModel(cfg)
        self.step = 0
        self.opt = None
        self._configure_stage()

    @property
    def total_steps(self) -> int:
        return self.cfg.stage1_steps + self.cfg.stage2_steps

    def stage_of(self, step: int) -> int:
        return 1 if step < self.cfg.stage1_steps else 2

    def lr_at(self, step: int) -> float:
        c = self.cfg
        if self.stage_of(step) == 1:
            return lr_schedule(step + 1, c.warmup, c.lr1, c.stage1_steps)
        return c.lr2

    def _configure_stage(self):
        stage = self.stage_of(self.step)
        self.model.patchifier.set_frozen(stage == 1)
        self.opt = AdamW(self.model.parameters(), weight_decay=self.cfg.weight_decay)
        self._stage = stage

    def resume(self, path):
        step, opt_state = load_training_state(path, self.model)
        self.step = step
        self._configure_stage()
        # a checkpoint taken exactly at a stage boundary starts the new stage fresh
        if step == 0 or self.stage_of(step - 1) == self._stage:
            self.opt.load_state(opt_state)

    def batch(self, step: int) -> Batch:
        idx = batch_indices(self.cfg.seed, step, self.pool, self.cfg.batch_size)
        return make_batch([self.source[i] for i in idx], self.cfg)

    def train_step(self) -> float:
        if self.stage_of(self.step) != self._stage:
            self._configure_stage()
        b = self.batch(self.step)
        loss = self.model.loss(b)
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step} (stage {self._stage})")
        loss.backward()
        self._clip_grads()
        self.opt.step(self.lr_at(self.step))
        self.step += 1
        return value

    def _clip_grads(self):
        if self.cfg.grad_clip <= 0:
            return
        live = [p for p in self.model.parameters() if not p.frozen and p.grad is not None]
        norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in live)))
        if norm > self.cfg.grad_clip:
            scale = np.float32(self.cfg.grad_clip / norm)
            for p in live:
                p.grad = p.grad * scale

    def checkpoint(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / "ckpt" / name
        save_training_state(path, self.model, self.opt, self.step)
        return path

    def run(self, until: int | None = None, progress=None) -> TrainResult:
        until = self.total_steps if until is None else min(until, self.total_steps)
        result = TrainResult(self.model)
        log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log = open(self.out_dir / "metrics.jsonl", "a")
        try:
            while self.step < until:
                step, stage, lr = self.step, self.stage_of(self.step), self.lr_at(self.step)
                t0 = time.perf_counter()
                loss = self.train_step()
                dt = time.perf_counter() - t0
                result.losses.append((step, loss))
                if log is not None and step % self.log_every == 0:
                    log.write(json.dumps({"step": step, "stage": stage, "loss": loss, "lr": lr,
                                          "clips_per_s": self.cfg.batch_size / dt}) + "\n")
                    log.flush()
                if progress is not None:
                    progress(step, loss)
                if self.step in (self.cfg.stage1_steps, self.total_steps) and self.out_dir:
                    name = "stage1.ckpt" if self.step == self.cfg.stage1_steps else "stage2.ckpt"
                    if self.step == self.total_steps and self.cfg.stage2_steps == 0:
                        name = "stage1.ckpt"
                    result.checkpoints.append(self.checkpoint(name))
        finally:
            if log is not None:
                log.close()
        return result


def train(cfg: RunConfig, source, out_dir=None, train_indices=None, resume=None,
          until: int | None = None, progress=None) -> TrainResult:
    """Train ``cfg`` on a ClipDataset (or clip list); returns the model and loss trace."""
    trainer = Trainer(cfg, source, train_indices, out_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run(until, progress)
