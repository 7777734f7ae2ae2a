"""Scripted ego kinematics along a piecewise constant-curvature road.

All motion is analytic in time so clips are exact and reproducible; time 0
is the last observed frame and the ego sits at the world origin then.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCENARIOS = ("lane_follow", "lane_change", "turn", "stop")


@dataclass
class Primitive:
    kind: str  # "line" | "arc"
    s0: float
    length: float
    x0: float
    y0: float
    heading0: float
    curvature: float = 0.0

    def point(self, s):
        """Pose at arc length ``s`` (array) measured from this primitive's start."""
        if self.kind == "line" or self.curvature == 0.0:
            h = np.full_like(s, self.heading0)
            return self.x0 + s * math.cos(self.heading0), self.y0 + s * math.sin(self.heading0), h
        k = self.curvature
        h = self.heading0 + k * s
        x = self.x0 + (np.sin(h) - math.sin(self.heading0)) / k
        y = self.y0 - (np.cos(h) - math.cos(self.heading0)) / k
        return x, y, h


@dataclass
class RoadPath:
    """Reference centerline made of line/arc pieces, parameterised by arc length."""

    primitives: list

    @classmethod
    def build(cls, pieces, s_start: float):
        """``pieces``: list of (length, curvature) starting at arc length ``s_start``.

        The piece containing s = 0 is anchored so that s = 0 maps to the origin
        with heading 0.
        """
        # lay out from s_start with provisional origin, then shift/rotate
        prims, s, x, y, h = [], s_start, 0.0, 0.0, 0.0
        for length, k in pieces:
            p = Primitive("arc" if k else "line", s, length, x, y, h, k)
            xe, ye, he = p.point(np.array([length]))
            prims.append(p)
            s, x, y, h = s + length, float(xe[0]), float(ye[0]), float(he[0])
        path = cls(prims)
        x0, y0, h0 = (float(v[0]) for v in path.pose(np.array([0.0])))
        c, sn = math.cos(-h0), math.sin(-h0)
        for p in prims:
            dx, dy = p.x0 - x0, p.y0 - y0
            p.x0, p.y0 = c * dx - sn * dy, sn * dx + c * dy
            p.heading0 -= h0
        return path

    @property
    def s_end(self) -> float:
        last = self.primitives[-1]
        return last.s0 + last.length

    def pose(self, s):
        s = np.asarray(s, dtype=np.float64)
        x = np.zeros_like(s)
        y = np.zeros_like(s)
        h = np.zeros_like(s)
        for i, p in enumerate(self.primitives):
            lo = -np.inf if i == 0 else p.s0
            hi = np.inf if i == len(self.primitives) - 1 else p.s0 + p.length
            sel = (s >= lo) & (s < hi)
            if sel.any():
                px, py, ph = p.point(s[sel] - p.s0)
                x[sel], y[sel], h[sel] = px, py, ph
        return x, y, h

    def project(self, px, py):
        """Signed lateral offset (left positive) and arc length of the nearest point."""
        best_d = np.full(px.shape, np.inf)
        lat = np.zeros(px.shape)
        arc = np.zeros(px.shape)
        for p in self.primitives:
            if p.kind == "line":
                ux, uy = math.cos(p.heading0), math.sin(p.heading0)
                rx, ry = px - p.x0, py - p.y0
                a = rx * ux + ry * uy
                ac = np.clip(a, 0.0, p.length)
                ox, oy = rx - ac * ux, ry - ac * uy
                d = np.hypot(ox, oy)
                l_off = -rx * uy + ry * ux
                along = ac
            else:
                k = p.curvature
                r = 1.0 / abs(k)
                sgn = 1.0 if k > 0 else -1.0
                cx = p.x0 - sgn * r * math.sin(p.heading0)
                cy = p.y0 + sgn * r * math.cos(p.heading0)
                dx, dy = px - cx, py - cy
                rho = np.hypot(dx, dy)
                phi0 = math.atan2(p.y0 - cy, p.x0 - cx)
                rel = (np.arctan2(dy, dx) - phi0) * sgn
                rel = (rel + np.pi) % (2 * np.pi) - np.pi
                along = np.clip(rel * r, 0.0, p.length)
                ex, ey, _ = p.point(along)
                d = np.hypot(px - ex, py - ey)
                l_off = sgn * (r - rho)
            closer = d < best_d
            best_d = np.where(closer, d, best_d)
            lat = np.where(closer, l_off, lat)
            arc = np.where(closer, p.s0 + along, arc)
        return lat, arc


@dataclass
class Agent:
    lane: int
    s0: float
    speed: float
    length: float = 4.5
    width: float = 1.9
    color: tuple = (0.85, 0.2, 0.15)


@dataclass
class Scenario:
    """Analytic description of one clip's world."""

    name: str
    path: RoadPath
    lane_width: float
    lanes_left: int
    lanes_right: int
    speed0: float
    accel: float = 0.0  # constant longitudinal acceleration (ignored when braking)
    decel: float = 0.0
    decel_start: float = math.inf
    change_offset: float = 0.0
    change_start: float = 0.0
    change_duration: float = 1.0
    agents: list = field(default_factory=list)
    has_road: bool = True

    # -- ego motion ---------------------------------------------------------
    def arc_length(self, t):
        t = np.asarray(t, dtype=np.float64)
        v0, a, ts = self.speed0, self.decel, self.decel_start
        s = v0 * t + 0.5 * self.accel * t * t
        if a > 0 and math.isfinite(ts):
            t_stop = ts + v0 / a
            braking = (t > ts) & (t <= t_stop)
            tb = t - ts
            s = np.where(braking, v0 * ts + v0 * tb - 0.5 * a * tb * tb, s)
            s = np.where(t > t_stop, v0 * ts + 0.5 * v0 * v0 / a, s)
        return s

    def speed_along(self, t):
        t = np.asarray(t, dtype=np.float64)
        v = self.speed0 + self.accel * t
        if self.decel > 0 and math.isfinite(self.decel_start):
            v = np.clip(self.speed0 - self.decel * (t - self.decel_start), 0.0, self.speed0)
        return v

    def lateral(self, t):
        t = np.asarray(t, dtype=np.float64)
        u = np.clip((t - self.change_start) / self.change_duration, 0.0, 1.0)
        return self.change_offset * 0.5 * (1.0 - np.cos(np.pi * u))

    def lateral_rate(self, t):
        t = np.asarray(t, dtype=np.float64)
        u = (t - self.change_start) / self.change_duration
        inside = (u > 0) & (u < 1)
        rate = self.change_offset * 0.5 * np.pi * np.sin(np.pi * np.clip(u, 0, 1)) / self.change_duration
        return np.where(inside, rate, 0.0)

    def ego_pose(self, t):
        """World (x, y, heading) of the ego at times ``t``."""
        s = self.arc_length(t)
        d = self.lateral(t)
        x, y, h = self.path.pose(s)
        x = x - d * np.sin(h)
        y = y + d * np.cos(h)
        # heading of the velocity vector; path heading when stationary
        sdot = self.speed_along(t)
        ddot = self.lateral_rate(t)
        kappa = self._curvature_at(s)
        fwd = sdot * (1.0 - kappa * d)
        heading = np.where((np.abs(fwd) + np.abs(ddot)) > 1e-9, h + np.arctan2(ddot, fwd), h)
        return x, y, heading

    def _curvature_at(self, s):
        k = np.zeros_like(s)
        for i, p in enumerate(self.path.primitives):
            lo = -np.inf if i == 0 else p.s0
            hi = np.inf if i == len(self.path.primitives) - 1 else p.s0 + p.length
            k = np.where((s >= lo) & (s < hi), p.curvature, k)
        return k

    # -- other actors -------------------------------------------------------
    def agent_poses(self, t: float):
        out = []
        for ag in self.agents:
            s = ag.s0 + ag.speed * t
            x, y, h = self.path.pose(np.array([s]))
            off = ag.lane * self.lane_width
            out.append((float(x[0] - off * math.sin(h[0])), float(y[0] + off * math.cos(h[0])),
                        float(h[0]), ag))
        return out

    def lane_offsets(self):
        """Offsets of lane boundaries (left positive), outermost edges first/last."""
        w = self.lane_width
        return [(i + 0.5) * w for i in range(-self.lanes_right - 1, self.lanes_left + 1)]


def sample_scenario(rng: np.random.Generator, name: str, max_agents: int, lane_width: float,
                    t_end: float) -> Scenario:
    """Draw a random instance of scripted scenario ``name``."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    lanes_left = int(rng.integers(0, 2))
    lanes_right = int(rng.integers(0, 2))
    kw = {}
    pieces = [(400.0, 0.0)]
    s_start = -150.0
    if name == "turn":
        # intersection-style turn of 55-90 degrees
        v0 = float(rng.uniform(3.0, 5.0))
        kappa = float(rng.uniform(0.04, 0.09)) * (1 if rng.random() < 0.5 else -1)
        s_turn = float(rng.uniform(-6.0, 15.0))
        arc_len = float(rng.uniform(0.6, 1.0)) * 0.5 * math.pi / abs(kappa)
        pieces = [(s_turn - s_start, 0.0), (arc_len, kappa), (250.0, 0.0)]
    elif name == "stop":
        v0 = float(rng.uniform(4.0, 7.0))
        kw = dict(decel=float(rng.uniform(1.5, 3.0)), decel_start=float(rng.uniform(-1.0, 2.0)))
    else:
        v0 = float(rng.uniform(3.0, 7.0))
    if name == "lane_follow":
        # speed keeps v > 0 over the clip window [-2.25, 5] s
        kw = dict(accel=float(rng.uniform(-0.5, 0.8)))
        if rng.random() < 0.6:
            s_bend = float(rng.uniform(-30.0, 25.0))
            kappa = float(rng.uniform(0.01, 0.03)) * (1 if rng.random() < 0.5 else -1)
            pieces = [(s_bend - s_start, 0.0), (float(rng.uniform(20.0, 60.0)), kappa), (300.0, 0.0)]
    if name == "lane_change":
        # make sure the target lane exists
        direction = 1 if rng.random() < 0.5 else -1
        if direction > 0:
            lanes_left = max(lanes_left, 1)
        else:
            lanes_right = max(lanes_right, 1)
        kw.update(change_offset=direction * lane_width,
                  change_start=float(rng.uniform(-1.5, 1.5)),
                  change_duration=float(rng.uniform(2.5, 4.0)))
    path = RoadPath.build(pieces, s_start)
    agents = []
    palette = [(0.85, 0.2, 0.15), (0.15, 0.35, 0.9), (0.95, 0.75, 0.1), (0.1, 0.75, 0.8)]
    lanes = [i for i in range(-lanes_right, lanes_left + 1) if i != 0]
    for i in range(int(rng.integers(0, max_agents + 1)) if max_agents > 0 else 0):
        lane = int(rng.choice(lanes)) if lanes else 0
        s0 = float(rng.uniform(-10.0, 45.0))
        if lane == 0 and s0 < 15.0:
            s0 += 20.0
        agents.append(Agent(lane, s0, float(rng.uniform(2.0, 8.0)), color=palette[i % len(palette)]))
    return Scenario(name, path, lane_width, lanes_left, lanes_right, v0, agents=agents, **kw)
