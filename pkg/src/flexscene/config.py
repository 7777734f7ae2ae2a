"""Flat run configuration shared by the model, trainer, evaluator and CLI."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .codec import WaypointVocab
from .encoder import EncoderConfig, VARIANTS
from .patchify import ConfigError, PatchifierConfig
from .policy import REPRS


@dataclass(frozen=True)
class RunConfig:
    # representation
    repr: str = "flex"
    variant: str = "joint_self"
    interleave: bool = True
    # clip shape
    cameras: int = 2
    timesteps: int = 9
    horizon: int = 10
    height: int = 32
    width: int = 64
    waypoint_dt: float = 0.5
    # patchifier
    patch_size: int = 8
    d_enc: int = 64
    patch_depth: int = 0
    patch_heads: int = 4
    flex_grid: tuple | None = None  # resize image grid before the scene encoder
    baseline_grid: tuple | None = None  # per-image N' grid for the baseline path
    # scene encoder
    K: int = 90
    enc_layers: int = 4
    enc_heads: int = 4
    # policy
    d_llm: int = 128
    policy_layers: int = 3
    policy_heads: int = 4
    x_bins: int = 32
    y_bins: int = 32
    x_range: tuple = (-5.0, 40.0)
    y_range: tuple = (-10.0, 10.0)
    h_past: int | None = None  # defaults to timesteps
    # optimisation
    stage1_steps: int = 2000
    stage2_steps: int = 500
    lr1: float = 4e-4
    lr2: float = 1e-5
    warmup: int = 100
    batch_size: int = 16
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    # data / eval
    dataset: str | None = None
    eval_clips: int | None = None  # cap on test-split clips evaluated
    eval_k: int = 6
    eval_temperature: float = 1.0

    # ---- derived views ----
    @property
    def history_len(self) -> int:
        return self.timesteps if self.h_past is None else self.h_past

    def patchifier_config(self) -> PatchifierConfig:
        return PatchifierConfig(self.patch_size, self.d_enc, self.patch_depth, self.patch_heads)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.K, self.enc_layers, self.enc_heads, self.d_enc, self.variant)

    def vocab(self) -> WaypointVocab:
        return WaypointVocab(self.x_bins, self.y_bins, tuple(self.x_range), tuple(self.y_range))

    def image_grid(self) -> tuple:
        return self.patchifier_config().grid_for(self.height, self.width)

    def scene_len(self) -> int:
        """Policy tokens per timestep."""
        if self.repr == "flex":
            return self.K // self.timesteps
        g = self.baseline_grid or self.image_grid()
        return g[0] * g[1] * self.cameras

    def scene_tokens(self) -> int:
        return self.scene_len() * self.timesteps

    @property
    def mode(self) -> str:
        return "interleaved" if self.interleave else "non_interleaved"

    def validate(self) -> "RunConfig":
        if self.repr not in REPRS:
            raise ConfigError(f"repr must be one of {REPRS}, got {self.repr!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.cameras < 1 or self.timesteps < 1 or self.horizon < 1:
            raise ConfigError("cameras, timesteps and horizon must be positive")
        self.image_grid()
        if self.repr == "flex":
            self.encoder_config().validate(self.cameras, self.timesteps)
        for g in (self.flex_grid, self.baseline_grid):
            if g is not None and (len(g) != 2 or min(g) < 1):
                raise ConfigError(f"token grids must be two positive extents, got {g}")
        if self.d_llm % self.policy_heads:
            raise ConfigError("d_llm must be divisible by policy_heads")
        if self.stage1_steps < 0 or self.stage2_steps < 0 or self.batch_size < 1:
            raise ConfigError("step counts must be >= 0 and batch_size >= 1")
        if self.warmup > self.stage1_steps:
            raise ConfigError(f"warmup ({self.warmup}) exceeds stage-1 steps ({self.stage1_steps})")
        if not self.lr2 < self.lr1:
            raise ConfigError(f"stage-2 lr ({self.lr2}) must be below stage-1 lr ({self.lr1})")
        self.vocab()
        return self

    # ---- serialisation ----
    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("x_range", "y_range", "flex_grid", "baseline_grid"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("x_range", "y_range", "flex_grid", "baseline_grid"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def updated(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
