import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexscene.autodiff import gradcheck
from flexscene.autodiff.tensor import ShapeError
from flexscene.codec import (
    SPECIALS,
    HistoryEncoder,
    VocabError,
    WaypointVocab,
    detokenize,
    discretize,
    encode_history,
)

DESK = WaypointVocab()


def bin_scan(p, vocab):
    """Brute-force oracle: the (x, y) bin whose half-open interval holds the point."""
    xe, ye = vocab.x_edges(), vocab.y_edges()
    for xb in range(vocab.x_bins):
        for yb in range(vocab.y_bins):
            if xe[xb] <= p[0] < xe[xb + 1] and ye[yb] <= p[1] < ye[yb + 1]:
                return xb * vocab.y_bins + yb
    raise AssertionError("point outside every bin")


def test_desk_vocab_sizes():
    assert DESK.n_waypoints == 1024
    assert DESK.vocab_size == 1024 + len(SPECIALS) == 1033
    assert DESK.start_id == 1024 and DESK.end_id == 1025 and DESK.camera_id(1) == 1027


def test_origin_maps_to_exact_centre_token():
    v = WaypointVocab(5, 7, (-5.0, 5.0), (-7.0, 7.0))
    assert discretize([0.0, 0.0], v) == 2 * 7 + 3
    np.testing.assert_array_equal(detokenize(17, v), [0.0, 0.0])


def test_beyond_range_clamps_to_edge_bins():
    ids = discretize([[100.0, 0.0], [-100.0, -100.0], [40.0, 10.0]], DESK)
    assert ids[0] // 32 == 31 and ids[1] == 0 and ids[2] == 1023


def test_eight_by_eight_grid_matches_bin_scan():
    v = WaypointVocab(8, 8, (-8.0, 8.0), (-8.0, 8.0))
    assert discretize([1.0, -1.0], v) == bin_scan((1.0, -1.0), v) == 4 * 8 + 3


@settings(max_examples=200)
@given(st.floats(-4.99, 39.99), st.floats(-9.99, 9.99))
def test_desk_grid_matches_bin_scan(x, y):
    assert discretize([x, y], DESK) == bin_scan((x, y), DESK)


def test_bin_centres_are_fixed_points():
    ids = np.arange(DESK.n_waypoints)
    assert np.array_equal(discretize(detokenize(ids, DESK), DESK), ids)


def test_quantization_bound_on_ten_thousand_points(rng):
    p = np.stack([rng.uniform(-5, 40, 10_000), rng.uniform(-10, 10, 10_000)], 1)
    err = np.abs(detokenize(discretize(p, DESK), DESK) - p)
    wx, wy = DESK.bin_width
    assert err[:, 0].max() <= wx / 2 + 1e-12 and err[:, 1].max() <= wy / 2 + 1e-12


@given(st.integers(1, 40), st.integers(1, 40), st.floats(-50, 50), st.floats(0.1, 80),
       st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_discretize_is_total(xb, yb, lo, span, x, y):
    v = WaypointVocab(xb, yb, (lo, lo + span), (lo, lo + span))
    i = int(discretize([x, y], v))
    assert 0 <= i < v.n_waypoints
    detokenize(i, v)


def test_edges_strictly_increasing():
    assert np.all(np.diff(DESK.x_edges()) > 0) and np.all(np.diff(DESK.y_edges()) > 0)


def test_special_ids_are_not_detokenizable():
    with pytest.raises(VocabError):
        detokenize([3, DESK.start_id], DESK)
    with pytest.raises(VocabError):
        detokenize(-1, DESK)


def test_bad_vocab_config():
    with pytest.raises(VocabError):
        WaypointVocab(0, 4)
    with pytest.raises(VocabError):
        WaypointVocab(4, 4, (1.0, 1.0))


def test_vocab_dict_round_trip():
    assert WaypointVocab.from_dict(DESK.to_dict()) == DESK


# ---- history token ------------------------------------------------------------------

@pytest.mark.parametrize("h_past", [1, 4, 9])
def test_history_is_one_token(rng, h_past):
    enc = HistoryEncoder(h_past, 128, seed=0)
    assert encode_history(rng.standard_normal((h_past, 4)), enc).shape == (1, 128)
    assert enc(rng.standard_normal((3, 2, h_past, 4))).shape == (3, 2, 1, 128)


def test_zero_weights_give_zero_token(rng):
    enc = HistoryEncoder(4, 16, seed=0)
    for p in enc.parameters():
        p.data[...] = 0
    assert not encode_history(rng.standard_normal((4, 4)), enc).data.any()


def test_wrong_history_length_is_an_error(rng):
    with pytest.raises(ShapeError):
        encode_history(rng.standard_normal((5, 4)), HistoryEncoder(4, 16, seed=0))


def test_history_gradcheck(rng):
    enc = HistoryEncoder(3, 8, seed=1)
    s = rng.standard_normal((2, 3, 4)) * 5
    assert gradcheck(lambda: encode_history(s, enc), enc.parameters())["ok"]
