import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexscene.analysis import (
    TokenResponse,
    localization_hit,
    marker_patch,
    mean_responses,
    ranks_of,
    read_pgm,
    response_arrays,
    response_map,
    sorted_response_curve,
    token_responses,
    top_token_key,
    write_curve_csv,
    write_grid_csv,
    write_pgm,
    write_responses_csv,
)
from flexscene.autodiff import DiffArray
from flexscene.encoder import EncoderConfig, KeyLayout, SceneEncoder

LAYOUT = KeyLayout(timesteps=3, cameras=2, grid=(2, 4))


def softmax_attn(rng, heads=2, K=5, M=LAYOUT.size):
    z = rng.standard_normal((heads, K, M)) * 3
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def loop_responses(attn):
    H, K, M = attn.shape
    out, arg = [], []
    for k in range(K):
        best, where = -1.0, -1
        for m in range(M):
            v = sum(attn[h, k, m] for h in range(H)) / H
            if v > best:
                best, where = v, m
        out.append(best)
        arg.append(where)
    return np.array(out), np.array(arg)


def test_single_token_two_keys():
    lay = KeyLayout(1, 1, (1, 2))
    (r,) = token_responses(np.array([[[0.2, 0.8]]]), lay)
    assert r == TokenResponse(0, 0.8, (0, 0, 0, 1), 0)


def test_uniform_attention_gives_one_over_m():
    attn = np.full((4, 6, LAYOUT.size), 1.0 / LAYOUT.size)
    assert all(r.max_response == pytest.approx(1 / 48) for r in token_responses(attn, LAYOUT))


def test_responses_match_the_loop_oracle(rng):
    for _ in range(5):
        attn = softmax_attn(rng)
        mx, arg = response_arrays(attn)
        ref, ref_arg = loop_responses(attn)
        assert np.abs(mx - ref).max() < 1e-9
        np.testing.assert_array_equal(arg, ref_arg)


def test_responses_are_probabilities_and_ranks_a_permutation(rng):
    rs = token_responses(softmax_attn(rng, K=9), LAYOUT)
    assert all(0 <= r.max_response <= 1 for r in rs)
    assert sorted(r.rank for r in rs) == list(range(9))
    best = min(rs, key=lambda r: r.rank)
    assert best.max_response == max(r.max_response for r in rs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(3)))
def test_responses_invariant_to_head_order(seed, perm):
    attn = softmax_attn(np.random.default_rng(seed), heads=3)
    np.testing.assert_allclose(response_arrays(attn[list(perm)])[0], response_arrays(attn)[0], atol=1e-15)


def test_layout_mismatch_is_an_error(rng):
    with pytest.raises(ValueError):
        token_responses(softmax_attn(rng, M=10), LAYOUT)


def test_ranks_of_is_stable_descending():
    np.testing.assert_array_equal(ranks_of([0.2, 0.9, 0.2, 0.5]), [2, 0, 3, 1])


# ---- curve ------------------------------------------------------------------------

def test_single_clip_curve_is_sorted_copy():
    r = np.array([0.1, 0.5, 0.3])
    np.testing.assert_array_equal(sorted_response_curve(r[None]), [0.5, 0.3, 0.1])


def test_identical_clips_give_the_single_clip_curve(rng):
    r = rng.random(7)
    np.testing.assert_array_equal(sorted_response_curve(np.stack([r, r])), sorted_response_curve(r[None]))


@settings(max_examples=40)
@given(st.integers(1, 5), st.integers(1, 30), st.integers(0, 1000))
def test_curve_is_non_increasing_and_length_k(clips, K, seed):
    curve = sorted_response_curve(np.random.default_rng(seed).random((clips, K)))
    assert len(curve) == K and np.all(np.diff(curve) <= 0)


def test_mean_responses_over_clips(rng):
    a, b = softmax_attn(rng), softmax_attn(rng)
    np.testing.assert_allclose(mean_responses([a, b]), (response_arrays(a)[0] + response_arrays(b)[0]) / 2)


def test_csv_outputs(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [0.5, 0.25])
    write_responses_csv(tmp_path / "r.csv", [0.25, 0.5])
    c = list(csv.reader(open(tmp_path / "c.csv")))
    r = list(csv.reader(open(tmp_path / "r.csv")))
    assert c == [["rank", "mean_max_response"], ["0", "0.5"], ["1", "0.25"]]
    assert r[0] == ["token_index", "mean_max_response", "rank"] and r[1][2] == "1" and r[2][2] == "0"


# ---- response maps ------------------------------------------------------------------

def test_maps_have_patch_grid_shape_and_sum_to_one(rng):
    attn = softmax_attn(rng)
    maps = response_map(3, attn, LAYOUT)
    assert set(maps) == {(c, t) for c in range(2) for t in range(3)}
    assert all(g.shape == (2, 4) for g in maps.values())
    assert abs(sum(g.sum() for g in maps.values()) - 1.0) < 1e-6


def test_maps_from_a_cross_attention_encoder_sum_to_one(rng):
    enc = SceneEncoder(EncoderConfig(K=6, layers=1, heads=2, d_enc=8, variant="joint_cross"), 2, 3, 0)
    rec = []
    enc(DiffArray(rng.standard_normal((1, 3, 2, 8, 8)).astype(np.float32)), record=rec)
    maps = response_map(0, rec[0][0], LAYOUT)
    assert abs(sum(float(g.sum()) for g in maps.values()) - 1.0) < 1e-6


def test_map_picks_the_right_image_block(rng):
    attn = np.zeros((1, 1, LAYOUT.size))
    attn[0, 0, LAYOUT.image_slice(1, 2).start + 5] = 1.0
    maps = response_map(0, attn, LAYOUT)
    assert maps[(1, 2)][1, 1] == 1.0 and sum(g.sum() for g in maps.values()) == 1.0


def test_bad_token_index(rng):
    with pytest.raises(IndexError):
        response_map(5, softmax_attn(rng), LAYOUT)


def test_pgm_and_grid_csv_round_trip(tmp_path):
    g = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "m.pgm", g)
    assert open(tmp_path / "m.pgm").read().startswith("P2\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 128], [255, 64]])
    write_grid_csv(tmp_path / "m.csv", g)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "m.csv", delimiter=","), g)
    write_pgm(tmp_path / "z.pgm", np.zeros((1, 3)))
    assert read_pgm(tmp_path / "z.pgm").sum() == 0


# ---- localisation helpers ----------------------------------------------------------

def test_marker_patch_and_hits(clips):
    clip = clips[0]
    grid = (4, 8)
    t = 8
    m = marker_patch(clip, 0, t, 32, 64, grid)
    assert m is not None
    assert localization_hit(clip, (0, t, m[0], m[1]), 32, 64, grid)
    assert localization_hit(clip, (0, t, m[0] + 1, m[1] - 1), 32, 64, grid)
    far_col = (m[1] + 4) % 8
    assert not localization_hit(clip, (0, t, m[0], far_col), 32, 64, grid)


def test_marker_pixel_matches_rendered_marker(clips):
    # the rendered magenta disc sits where marker_pixel says
    for clip in clips[:6]:
        r, c = clip.marker_pixel(0, 8, 32, 64)
        if not (1 <= r < 31 and 1 <= c < 63):
            continue
        px = clip.images[0, 8, int(r), int(c)]
        assert px[0] > 0.6 and px[2] > 0.6 and px[1] < 0.45, (clip.clip_id, px)


def test_top_token_key_uses_the_strongest_token():
    attn = np.zeros((2, 3, LAYOUT.size))
    attn[:, 0, 4] = 0.3
    attn[:, 2, 17] = 0.9
    assert top_token_key(attn, LAYOUT) == LAYOUT.decode(17)
