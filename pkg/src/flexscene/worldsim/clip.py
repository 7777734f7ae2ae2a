from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .render import WorldState, background_texture, ego_to_pixel, render_camera, rig
from .scenario import SCENARIOS, Scenario, sample_scenario


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    cameras: int = 2
    timesteps: int = 9
    horizon: int = 10
    height: int = 32
    width: int = 64
    frame_dt: float = 0.25
    waypoint_dt: float = 0.5
    lane_width: float = 3.5
    max_agents: int = 3
    scenario_mix: tuple = (0.4, 0.25, 0.25, 0.1)
    scenario: str | None = None  # force one scenario (e.g. probes)
    supersample: int = 2
    jitter: float = 0.01

    def validate(self) -> "WorldConfig":
        if self.cameras < 1 or self.timesteps < 2 or self.horizon < 1:
            raise ConfigError(f"need cameras>=1, timesteps>=2, horizon>=1; got "
                              f"{self.cameras}/{self.timesteps}/{self.horizon}")
        if self.height < 1 or self.width < 1 or self.frame_dt <= 0 or self.waypoint_dt <= 0:
            raise ConfigError("image extents and time steps must be positive")
        if len(self.scenario_mix) != len(SCENARIOS) or abs(sum(self.scenario_mix) - 1) > 1e-9:
            raise ConfigError(f"scenario_mix must be {len(SCENARIOS)} weights summing to 1")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        rig(self.cameras)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario_mix"] = list(self.scenario_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "scenario_mix" in d:
            d["scenario_mix"] = tuple(d["scenario_mix"])
        return cls(**d)


@dataclass
class Clip:
    clip_id: int
    seed: int
    scenario: str
    camera_ids: list
    images: np.ndarray  # (C, T, H, W, 3)
    timestamps: np.ndarray  # (T,) seconds, last observed frame at 0
    ego_states: np.ndarray  # (T, 4) world-frame x, y, heading, speed
    future: np.ndarray  # (H, 2) ego frame of the last observed frame
    step_futures: np.ndarray  # (T, H, 2) future at every observed frame, its own ego frame
    destination: np.ndarray = field(default_factory=lambda: np.zeros(2, np.float32))

    @property
    def history(self) -> np.ndarray:
        """Observed ego states in the ego frame of the final frame."""
        return self.history_at(len(self.timestamps) - 1, None)

    def history_at(self, k: int, h_past: int | None) -> np.ndarray:
        """States 0..k in the ego frame of frame ``k``; left-padded with the
        earliest state to ``h_past`` rows when given."""
        x0, y0, h0, _ = (float(v) for v in self.ego_states[k])
        st = self.ego_states[: k + 1].astype(np.float64)
        c, s = math.cos(h0), math.sin(h0)
        dx, dy = st[:, 0] - x0, st[:, 1] - y0
        out = np.stack([c * dx + s * dy, -s * dx + c * dy,
                        _wrap_angle(st[:, 2] - h0), st[:, 3]], axis=1)
        if h_past is not None:
            if len(out) >= h_past:
                out = out[-h_past:]
            else:
                out = np.concatenate([np.repeat(out[:1], h_past - len(out), axis=0), out])
        return out.astype(np.float32)

    def marker_pixel(self, c: int, t: int, height: int, width: int):
        """Continuous pixel (row, col) of the destination marker in image (c, t)."""
        cam = rig(len(self.camera_ids))[c]
        x0, y0, h0, _ = (float(v) for v in self.ego_states[t])
        dx, dy = float(self.destination[0]) - x0, float(self.destination[1]) - y0
        ex = math.cos(h0) * dx + math.sin(h0) * dy
        ey = -math.sin(h0) * dx + math.cos(h0) * dy
        return ego_to_pixel(cam, height, width, ex, ey)


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def clip_seed(seed: int, index: int) -> int:
    """Per-clip seed derived from a dataset seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def pick_scenario(rng: np.random.Generator, config: WorldConfig) -> str:
    if config.scenario is not None:
        return config.scenario
    return SCENARIOS[int(rng.choice(len(SCENARIOS), p=np.asarray(config.scenario_mix)))]


def world_at(sc: Scenario, t: float, seed: int, destination, texture) -> WorldState:
    x, y, h = sc.ego_pose(np.array([t]))
    return WorldState(
        ego_pose=(float(x[0]), float(y[0]), float(h[0])),
        ego_speed=float(sc.speed_along(np.array([t]))[0]),
        lane_geometry=sc.path if sc.has_road else None,
        lane_offsets=sc.lane_offsets(),
        lane_width=sc.lane_width,
        agents=sc.agent_poses(t),
        destination=destination,
        seed=seed,
        texture=texture,
    )


def _to_ego(px, py, pose):
    x0, y0, h0 = pose
    c, s = math.cos(h0), math.sin(h0)
    dx, dy = px - x0, py - y0
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def generate_clip(seed: int, config: WorldConfig = WorldConfig(), clip_id: int = 0) -> Clip:
    """Simulate and render one clip; a pure function of (seed, config)."""
    config.validate()
    rng = np.random.default_rng(seed)
    name = pick_scenario(rng, config)
    horizon_s = config.horizon * config.waypoint_dt
    sc = sample_scenario(rng, name, config.max_agents, config.lane_width, horizon_s)
    T, H = config.timesteps, config.horizon
    times = (np.arange(T) - (T - 1)) * config.frame_dt

    ex, ey, eh = sc.ego_pose(times)
    px, py, _ = sc.ego_pose(times - config.frame_dt)
    speed = np.hypot(ex - px, ey - py) / config.frame_dt
    ego_states = np.stack([ex, ey, eh, speed], axis=1)

    offsets = (np.arange(1, H + 1)) * config.waypoint_dt
    step_futures = np.zeros((T, H, 2))
    for k in range(T):
        fx, fy, _ = sc.ego_pose(times[k] + offsets)
        step_futures[k] = _to_ego(fx, fy, (ex[k], ey[k], eh[k]))
    dx, dy, _ = sc.ego_pose(np.array([horizon_s]))
    destination = (float(dx[0]), float(dy[0]))

    cams = rig(config.cameras)
    texture = background_texture(seed)
    images = np.zeros((config.cameras, T, config.height, config.width, 3), np.float32)
    for t in range(T):
        world = world_at(sc, float(times[t]), seed, destination, texture)
        for c, cam in enumerate(cams):
            images[c, t] = render_camera(world, cam, jitter_seed=t * 16 + c,
                                         height=config.height, width=config.width,
                                         ss=config.supersample, jitter=config.jitter)
    return Clip(
        clip_id=clip_id,
        seed=int(seed),
        scenario=name,
        camera_ids=[cam.name for cam in cams],
        images=images,
        timestamps=times.astype(np.float32),
        ego_states=ego_states.astype(np.float32),
        future=step_futures[-1].astype(np.float32),
        step_futures=step_futures.astype(np.float32),
        destination=np.asarray(destination, np.float32),
    )
