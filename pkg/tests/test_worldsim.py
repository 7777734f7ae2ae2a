import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexscene.worldsim import (
    SCENARIOS,
    TELE,
    WIDE,
    ClipDataset,
    ConfigError,
    DatasetError,
    Scenario,
    WorldConfig,
    WorldState,
    background_texture,
    clip_seed,
    generate_clip,
    is_test_clip,
    read_dataset,
    render_camera,
    sample_scenario,
    split_ids,
    write_dataset,
)
from flexscene.worldsim.render import MARKING_THRESHOLD
from flexscene.worldsim.scenario import Agent, RoadPath


def upsample2x(img):
    """Separable bilinear 2x upsample with half-pixel centres (independent of patchify)."""
    def axis(a, n_out, ax):
        n_in = a.shape[ax]
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        w = (pos - lo).reshape([-1 if i == ax else 1 for i in range(a.ndim)])
        return np.take(a, lo, ax) * (1 - w) + np.take(a, hi, ax) * w
    return axis(axis(img, img.shape[0] * 2, 0), img.shape[1] * 2, 1)


def straight_scenario(v0=5.0, accel=0.0):
    return Scenario("lane_follow", RoadPath.build([(400.0, 0.0)], -150.0), 3.5, 0, 0, v0, accel=accel)


def empty_world(**kw):
    base = dict(ego_pose=(0.0, 0.0, 0.0), ego_speed=0.0, lane_geometry=None, lane_offsets=[],
                lane_width=3.5, agents=[], destination=None, seed=5, texture=background_texture(5))
    base.update(kw)
    return WorldState(**base)


# ---- generate_clip --------------------------------------------------------------

def test_same_seed_gives_byte_identical_clips(world):
    a, b = generate_clip(77, world), generate_clip(77, world)
    for f in ("images", "timestamps", "ego_states", "future", "step_futures", "destination"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.scenario == b.scenario


def test_different_seeds_differ(world):
    assert generate_clip(1, world).images.tobytes() != generate_clip(2, world).images.tobytes()


def test_clip_shapes_and_ranges(clips, world):
    for clip in clips:
        assert clip.images.shape == (world.cameras, world.timesteps, world.height, world.width, 3)
        assert clip.images.min() >= 0.0 and clip.images.max() <= 1.0
        assert np.all(np.diff(clip.timestamps) > 0)
        assert clip.future.shape == (world.horizon, 2)
        assert clip.camera_ids == ["front_wide", "front_tele"]
        assert clip.scenario in SCENARIOS


def test_future_is_in_final_frame_ego_coordinates(clips):
    # the final ego state sits at the origin of its own frame, heading forward
    for clip in clips:
        h = clip.history
        np.testing.assert_allclose(h[-1, :3], 0.0, atol=1e-5)
        np.testing.assert_array_equal(clip.future, clip.step_futures[-1])
        # moving forward: the first waypoint is ahead, not behind
        assert clip.future[0, 0] > 0


def test_straight_constant_speed_future_is_colinear():
    sc = straight_scenario()
    t = np.arange(1, 11) * 0.5
    x, y, h = sc.ego_pose(t)
    pts = np.stack([x, y], 1)
    d = pts - pts[0]
    cross = d[:, 0] * (pts[-1] - pts[0])[1] - d[:, 1] * (pts[-1] - pts[0])[0]
    assert np.abs(cross).max() / np.linalg.norm(pts[-1] - pts[0]) < 1e-6
    np.testing.assert_allclose(np.diff(x), 2.5, atol=1e-9)


def test_history_speed_matches_finite_difference(clips, world):
    for clip in clips:
        xy = clip.ego_states[:, :2].astype(np.float64)
        fd = np.linalg.norm(np.diff(xy, axis=0), axis=1) / world.frame_dt
        np.testing.assert_allclose(fd, clip.ego_states[1:, 3], atol=1e-4)


def test_history_at_left_pads_with_the_earliest_state(clips):
    h = clips[0].history_at(2, 5)
    assert h.shape == (5, 4)
    np.testing.assert_array_equal(h[0], h[2])
    np.testing.assert_allclose(h[-1, :3], 0.0, atol=1e-6)
    assert clips[0].history_at(8, 4).shape == (4, 4)


@pytest.mark.parametrize("bad", [dict(cameras=0), dict(timesteps=1), dict(horizon=0), dict(cameras=8),
                                 dict(scenario="drift"), dict(scenario_mix=(1.0,))])
def test_degenerate_config_is_config_error(bad):
    with pytest.raises((ConfigError, ValueError)):
        generate_clip(0, WorldConfig(**bad))


@pytest.mark.parametrize("name", SCENARIOS)
def test_every_scenario_keeps_ego_on_the_road(name):
    for i in range(15):
        rng = np.random.default_rng(i)
        sc = sample_scenario(rng, name, 3, 3.5, 5.0)
        t = np.linspace(-2.25, 5.0, 30)
        x, y, _ = sc.ego_pose(t)
        lat, _ = sc.path.project(x, y)
        edges = sc.lane_offsets()
        assert np.all(lat >= edges[0] - 1e-6) and np.all(lat <= edges[-1] + 1e-6)


def test_stop_scenario_comes_to_rest():
    sc = sample_scenario(np.random.default_rng(3), "stop", 0, 3.5, 5.0)
    v = sc.speed_along(np.array([sc.decel_start + sc.speed0 / sc.decel + 0.1, 100.0]))
    np.testing.assert_array_equal(v, 0.0)


def test_forced_scenario_is_respected():
    cfg = WorldConfig(scenario="turn")
    assert {generate_clip(s, cfg).scenario for s in range(4)} == {"turn"}


# ---- rendering -----------------------------------------------------------------

def test_empty_world_is_background_only():
    img = render_camera(empty_world(), WIDE, jitter_seed=0)
    assert img.shape == (32, 64, 3)
    assert img.max() < MARKING_THRESHOLD


def test_agent_dead_ahead_visible_in_both_views():
    ag = Agent(lane=0, s0=0.0, speed=0.0)
    w = empty_world(agents=[(20.0, 0.0, 0.0, ag)])
    for cam in (WIDE, TELE):
        img = render_camera(w, cam, jitter_seed=1)
        red = (img[..., 0] > 0.6) & (img[..., 1] < 0.35)
        assert red.sum() > 0, cam.name


def test_agent_out_of_view_is_absent():
    ag = Agent(lane=0, s0=0.0, speed=0.0)
    img = render_camera(empty_world(agents=[(0.0, 40.0, 0.0, ag)]), WIDE, jitter_seed=1)
    assert not np.any((img[..., 0] > 0.6) & (img[..., 1] < 0.35))


def test_telephoto_matches_upsampled_wide_centre(clips):
    # wide spans 48 m x 32 m; tele the central 24 m x 16 m
    for clip in clips:
        for t in range(clip.images.shape[1]):
            crop = clip.images[0, t, 8:24, 16:48].astype(np.float64)
            diff = np.abs(upsample2x(crop) - clip.images[1, t]).mean()
            assert diff < 0.05, (clip.clip_id, t, diff)


def test_consecutive_frames_are_continuous(clips):
    for clip in clips:
        d = np.abs(np.diff(clip.images, axis=1)).mean(axis=(0, 2, 3, 4))
        assert d.max() < 0.2, (clip.clip_id, d.max())


def test_low_speed_consecutive_frames(world):
    cfg = WorldConfig(scenario="stop")
    clip = generate_clip(4, cfg)
    assert np.abs(np.diff(clip.images, axis=1)).mean() < 0.2


def test_destination_marker_drawn_where_projected(world):
    w = empty_world(destination=(20.0, 0.0))
    img = render_camera(w, WIDE, jitter_seed=0, jitter=0.0)
    r, c = int((44 - 20) / 48 * 32), 32
    assert img[r, c, 0] > 0.8 and img[r, c, 1] < 0.3


# ---- dataset files ---------------------------------------------------------------

def test_round_trip_is_field_exact(tmp_path, clips, world):
    path = tmp_path / "d.flex"
    assert write_dataset(clips[:10], path, world) == 10
    back = list(read_dataset(path))
    ds = ClipDataset(path)
    assert len(back) == len(ds) == 10
    for a, b, c in zip(clips, back, (ds[i] for i in range(10))):
        for f in ("images", "timestamps", "ego_states", "future", "step_futures", "destination"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes() == getattr(c, f).tobytes()
        assert (a.clip_id, a.seed, a.scenario, a.camera_ids) == (b.clip_id, b.seed, b.scenario, b.camera_ids)
    assert ds.config == world


def test_file_layout_header(tmp_path, clips, world):
    path = tmp_path / "d.flex"
    write_dataset(clips[:2], path, world)
    raw = path.read_bytes()
    assert raw[:8] == b"FLEXDATA"
    version, hlen = struct.unpack_from("<II", raw, 8)
    assert version == 1
    (count,) = struct.unpack_from("<Q", raw, 16 + hlen)
    assert count == 2


def test_truncated_file_names_the_record(tmp_path, clips, world):
    path = tmp_path / "d.flex"
    write_dataset(clips[:3], path, world)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DatasetError) as exc:
        list(read_dataset(path))
    assert exc.value.record == 2 and "record 2" in str(exc.value)
    with pytest.raises(DatasetError, match="record 2"):
        ClipDataset(path)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.flex"
    p.write_bytes(b"NOTFLEX!" + bytes(20))
    with pytest.raises(DatasetError, match="magic"):
        ClipDataset(p)


def test_split_is_disjoint_exhaustive_and_near_ninety_ten():
    ids = list(range(5000))
    train, test = split_ids(ids)
    assert set(train).isdisjoint(test) and sorted(train + test) == ids
    assert 0.08 < len(test) / len(ids) < 0.12


@given(st.lists(st.integers(0, 2**40), unique=True, max_size=200))
def test_split_membership_depends_only_on_id(ids):
    train, test = split_ids(ids)
    assert set(test) == {i for i in ids if is_test_clip(i)}
    assert set(train) | set(test) == set(ids)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 1000))
def test_clip_seed_is_stable_and_in_u64(seed, idx):
    s = clip_seed(seed, idx)
    assert s == clip_seed(seed, idx) and 0 <= s < 2**64
