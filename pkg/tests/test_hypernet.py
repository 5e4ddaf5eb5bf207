import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperspotter import hypernet as hn
from hyperspotter import numerics as nx
from hyperspotter.config import DESK, HypernetConfig
from hyperspotter.layers import count
from hyperspotter.numerics import Tensor

SMALL = HypernetConfig(embed_dim=8, lstm_layers=1, hidden=16, proj_hidden=32, channels=16, kernel=8)


def test_small_config_hand_count():
    # embed 29*8 + LSTM 4*16*(8+16) + 4*16 + proj1 16*32+32 + proj2 32*128+128
    want = 232 + 1536 + 64 + 544 + 4224
    assert hn.count_params(SMALL) == want == 6600
    assert count(hn.init_hypernet(SMALL, np.random.default_rng(0))) == want


def test_paper_scale_count():
    cfg = HypernetConfig()
    assert cfg.n_weights == 1024 == 64 * 16
    n = hn.count_params(cfg)
    assert abs(n - 2.7e6) <= 0.1 * 2.7e6
    assert count(hn.init_hypernet(cfg, np.random.default_rng(0))) == n


def test_weights_shape_and_determinism():
    params = hn.init_hypernet(DESK.hypernet, np.random.default_rng(0))
    a = hn.generate_weights("cat", params, DESK.hypernet)
    b = hn.generate_weights("cat", params, DESK.hypernet)
    assert a.weights.shape == (16, 16) and a.weights.dtype == np.float32
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, hn.generate_weights("dog", params, DESK.hypernet).weights)


def test_keyword_normalised_and_validated():
    params = hn.init_hypernet(SMALL, np.random.default_rng(0))
    assert hn.generate_weights("  Cat ", params, SMALL).keyword == "cat"
    with pytest.raises(ValueError):
        hn.generate_weights("   ", params, SMALL)
    with pytest.raises(ValueError):
        hn.generate_weights("c@t", params, SMALL)


@given(st.lists(st.text("abcdefghijklmnopqrstuvwxyz '", min_size=1, max_size=7)
                .filter(lambda s: s.strip()), min_size=1, max_size=5))
@settings(max_examples=25, deadline=None)
def test_batched_rows_match_single_keyword(keywords):
    # padding rows of a shorter keyword must not change its filter
    params = hn.init_hypernet(SMALL, np.random.default_rng(1))
    with nx.no_grad():
        batch = hn.weights_tensor(keywords, params, SMALL).data
    for row, kw in zip(batch, keywords):
        np.testing.assert_allclose(row, hn.generate_weights(kw, params, SMALL).weights,
                                   rtol=1e-5, atol=1e-6)


def test_gradients_single_char_keyword():
    cfg = HypernetConfig(embed_dim=3, lstm_layers=2, hidden=4, proj_hidden=5, channels=2, kernel=3)
    with nx.precision(np.float64):
        params = hn.init_hypernet(cfg, np.random.default_rng(3))
        params = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in params.items()}
        err = nx.check_gradients(lambda: hn.weights_tensor(["a"], params, cfg), list(params.values()))
    assert err <= 1e-4


def test_gradients_mixed_lengths():
    cfg = HypernetConfig(embed_dim=3, lstm_layers=1, hidden=4, proj_hidden=5, channels=2, kernel=3)
    with nx.precision(np.float64):
        params = hn.init_hypernet(cfg, np.random.default_rng(4))
        params = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in params.items()}
        err = nx.check_gradients(lambda: hn.weights_tensor(["ab", "c", "abc"], params, cfg),
                                 list(params.values()))
    assert err <= 1e-4


# -- HSKW0001 ---------------------------------------------------------------------------------------

def test_filter_round_trip_is_bit_exact(tmp_path):
    params = hn.init_hypernet(DESK.hypernet, np.random.default_rng(0))
    filt = hn.generate_weights("hello world", params, DESK.hypernet)
    hn.write_filter(tmp_path / "k.hskw", filt)
    back = hn.read_filter(tmp_path / "k.hskw")
    assert back.keyword == "hello world"
    assert back.weights.tobytes() == filt.weights.tobytes()


def test_filter_layout(tmp_path):
    filt = hn.KeywordFilter("ab", np.arange(6, dtype=np.float32).reshape(2, 3))
    hn.write_filter(tmp_path / "k.hskw", filt)
    blob = (tmp_path / "k.hskw").read_bytes()
    assert blob[:8] == b"HSKW0001"
    assert blob[8:18] == bytes([1, 0, 3, 0, 2, 0, 2, 0, 0, 0])
    assert blob[18:20] == b"ab" and len(blob) == 20 + 24 + 4


@pytest.mark.parametrize("damage", ["flip", "truncate", "magic"])
def test_filter_corruption_detected(tmp_path, damage):
    hn.write_filter(tmp_path / "k.hskw", hn.KeywordFilter("ab", np.ones((2, 3), np.float32)))
    blob = bytearray((tmp_path / "k.hskw").read_bytes())
    if damage == "flip":
        blob[25] ^= 0x10
    elif damage == "truncate":
        blob = blob[:-6]
    else:
        blob[:4] = b"XXXX"
    (tmp_path / "bad.hskw").write_bytes(bytes(blob))
    with pytest.raises(hn.FilterFormatError):
        hn.read_filter(tmp_path / "bad.hskw")
