"""Flat-shaded top-down rasteriser for the camera rig.

Each camera looks at a rectangle of ground in the ego frame (rows = forward
distance, far at the top; columns = lateral offset, left at column 0). The
telephoto slot images the central half of the wide rectangle at the same
pixel count, i.e. a 2x centre zoom. Side slots rotate the wide rectangle
about the ego. Pixels are box-filtered over a supersampling grid so the
wide/tele renders agree up to resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MARKING_THRESHOLD = 0.8

BACKGROUND = np.array([0.25, 0.42, 0.2])
ROAD = np.array([0.33, 0.33, 0.36])
MARKING = np.array([0.95, 0.95, 0.95])
DESTINATION = np.array([1.0, 0.1, 0.9])
MARKER_RADIUS = 2.0
MARKING_HALF_WIDTH = 0.3
DASH_PERIOD = 6.0
# metres over which shape edges ramp; keeps wide/tele renders resampling-consistent
EDGE_SOFTNESS = 1.0


@dataclass(frozen=True)
class CameraSpec:
    name: str
    yaw: float  # radians, counter-clockwise from ego forward
    forward: tuple  # (near, far) metres along the viewing direction
    lateral: float  # half width in metres


WIDE = CameraSpec("front_wide", 0.0, (-4.0, 44.0), 16.0)
TELE = CameraSpec("front_tele", 0.0, (8.0, 32.0), 8.0)

RIG = (
    WIDE,
    TELE,
    CameraSpec("left", math.pi / 2, (-4.0, 44.0), 16.0),
    CameraSpec("right", -math.pi / 2, (-4.0, 44.0), 16.0),
    CameraSpec("rear", math.pi, (-4.0, 44.0), 16.0),
    CameraSpec("front_left", math.pi / 4, (-4.0, 44.0), 16.0),
    CameraSpec("front_right", -math.pi / 4, (-4.0, 44.0), 16.0),
)


def rig(cameras: int) -> tuple:
    if not 1 <= cameras <= len(RIG):
        raise ValueError(f"camera count must be in [1, {len(RIG)}], got {cameras}")
    return RIG[:cameras]


@dataclass
class WorldState:
    """Snapshot of everything visible at one instant (world frame)."""

    ego_pose: tuple  # (x, y, heading)
    ego_speed: float
    lane_geometry: object  # RoadPath or None
    lane_offsets: list  # boundary offsets from the reference path, left positive
    lane_width: float
    agents: list  # (x, y, heading, Agent)
    destination: tuple | None
    seed: int
    texture: np.ndarray  # (n, 4) wave table: kx, ky, phase, amplitude


def background_texture(seed: int, n: int = 6) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xB6])
    wavelength = rng.uniform(6.0, 30.0, n)
    angle = rng.uniform(0, 2 * np.pi, n)
    k = 2 * np.pi / wavelength
    return np.stack([k * np.cos(angle), k * np.sin(angle),
                     rng.uniform(0, 2 * np.pi, n), rng.uniform(0.3, 1.0, n)], axis=1)


def pixel_grid(cam: CameraSpec, height: int, width: int, ss: int):
    """Ego-frame sample points (height, width, ss*ss, 2) for a camera."""
    near, far = cam.forward
    fy = (np.arange(height * ss) + 0.5) / (height * ss)
    fx = (np.arange(width * ss) + 0.5) / (width * ss)
    fwd = far - fy * (far - near)
    lat = cam.lateral - fx * 2 * cam.lateral
    F, L = np.meshgrid(fwd, lat, indexing="ij")
    c, s = math.cos(cam.yaw), math.sin(cam.yaw)
    ex = c * F - s * L
    ey = s * F + c * L
    pts = np.stack([ex, ey], axis=-1).reshape(height, ss, width, ss, 2)
    return pts.transpose(0, 2, 1, 3, 4).reshape(height, width, ss * ss, 2)


def ego_to_pixel(cam: CameraSpec, height: int, width: int, ex: float, ey: float):
    """Continuous (row, col) pixel coordinates of an ego-frame point."""
    c, s = math.cos(cam.yaw), math.sin(cam.yaw)
    f = c * ex + s * ey
    lat = -s * ex + c * ey
    near, far = cam.forward
    row = (far - f) / (far - near) * height
    col = (cam.lateral - lat) / (2 * cam.lateral) * width
    return row, col


def _coverage(signed_dist):
    """Soft inside-ness from a signed distance (negative = inside)."""
    return np.clip(0.5 - signed_dist / EDGE_SOFTNESS, 0.0, 1.0)


def _blend(img, color, alpha):
    return img + alpha[..., None] * (np.asarray(color) - img)


def render_camera(world: WorldState, camera: CameraSpec, jitter_seed: int,
                  height: int = 32, width: int = 64, ss: int = 2, jitter: float = 0.01) -> np.ndarray:
    """Rasterise ``world`` as seen by ``camera`` into an (H, W, 3) float image in [0, 1]."""
    pts = pixel_grid(camera, height, width, ss)
    x0, y0, h0 = world.ego_pose
    c, s = math.cos(h0), math.sin(h0)
    wx = x0 + c * pts[..., 0] - s * pts[..., 1]
    wy = y0 + s * pts[..., 0] + c * pts[..., 1]

    tex = world.texture
    phase = wx[..., None] * tex[:, 0] + wy[..., None] * tex[:, 1] + tex[:, 2]
    noise = (np.sin(phase) * tex[:, 3]).sum(-1) / tex[:, 3].sum()
    img = BACKGROUND + 0.08 * noise[..., None] * np.array([0.6, 1.0, 0.5])

    if world.lane_geometry is not None:
        lat, arc = world.lane_geometry.project(wx, wy)
        edges = world.lane_offsets
        on_road = _coverage(np.maximum(edges[0] - lat, lat - edges[-1]))
        img = _blend(img, ROAD, on_road)
        for i, off in enumerate(edges):
            line = _coverage(np.abs(lat - off) - MARKING_HALF_WIDTH)
            if 0 < i < len(edges) - 1:
                phase = arc % DASH_PERIOD
                half = DASH_PERIOD / 2
                # signed distance to the painted half of the dash period
                dash = np.where(phase < half, -np.minimum(phase, half - phase),
                                np.minimum(phase - half, DASH_PERIOD - phase))
                line = line * _coverage(dash)
            img = _blend(img, MARKING, line)

    for ax, ay, ah, agent in world.agents:
        ca, sa = math.cos(ah), math.sin(ah)
        u = ca * (wx - ax) + sa * (wy - ay)
        v = -sa * (wx - ax) + ca * (wy - ay)
        dist = np.maximum(np.abs(u) - agent.length / 2, np.abs(v) - agent.width / 2)
        img = _blend(img, np.asarray(agent.color), _coverage(dist))

    if world.destination is not None:
        dx, dy = world.destination
        img = _blend(img, DESTINATION, _coverage(np.hypot(wx - dx, wy - dy) - MARKER_RADIUS))

    img = img.mean(axis=2)
    if jitter > 0:
        rng = np.random.default_rng([world.seed, jitter_seed])
        img = img + rng.uniform(-jitter, jitter, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
