import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from commtopo.data import (DataConfig, DataLengthError, HankelBundle, average_bundles, build_bundle,
                           check_persistency, collect, hankel)
from commtopo.system import NoiseSpec, generate_pe_input, numerical_rank, simulate


def test_bundle_dimensions(clean_bundle):
    b = clean_bundle
    assert b.L == 200 - 3 - 5 + 1
    assert b.UP.shape == (12, 193) and b.YP.shape == (12, 193)
    assert b.UF.shape == (20, 193) and b.YF.shape == (20, 193)
    assert b.Z.shape == (44, 193)


def test_noise_free_rank(clean_bundle):
    # inputs (32) plus initial state (8) span the data
    assert numerical_rank(clean_bundle.Z) == 40


def test_column_zero_is_first_window(swing):
    cfg = DataConfig()
    u = generate_pe_input(swing.m, cfg.T, seed=7)
    tr = simulate(swing, u)
    b = build_bundle(tr, cfg)
    # agent 1 input past block, second sample of column 5
    r0 = b.index_map["u-past"][1][0]
    assert b.UP[r0 + 1, 5] == u[6, 1]
    f0 = b.index_map["y-future"][2][0]
    assert b.YF[f0 + 4, 10] == tr.y[10 + 3 + 4, 2]


def test_z_rows_kind_major(clean_bundle):
    rows = clean_bundle.z_rows([2, 0])
    imap = clean_bundle.index_map
    expect = [*range(*imap["u-past"][0]), *range(*imap["u-past"][2]),
              *range(*imap["y-past"][0]), *range(*imap["y-past"][2]),
              *range(*imap["u-future"][0]), *range(*imap["u-future"][2])]
    assert rows.tolist() == expect


def test_too_short_rejected(swing):
    cfg = DataConfig(T=78)
    assert cfg.T_min(4) == 79
    tr = simulate(swing, generate_pe_input(4, 78, seed=0))
    with pytest.raises(DataLengthError, match="T_min"):
        build_bundle(tr, cfg)
    b = build_bundle(tr, cfg, enforce_min_length=False)
    assert b.L == 78 - 8 + 1


def test_save_load_roundtrip(tmp_path, clean_bundle):
    clean_bundle.save(tmp_path / "b", {"seed": 1})
    back = HankelBundle.load(tmp_path / "b")
    for k in ("UP", "YP", "UF", "YF"):
        np.testing.assert_array_equal(getattr(back, k), getattr(clean_bundle, k))
    assert back.index_map == clean_bundle.index_map


def test_average_bundles_mean_and_checks(swing):
    cfg = DataConfig(T=100)
    u = generate_pe_input(swing.m, 100, seed=0)
    rng = np.random.default_rng(0)
    bs = [build_bundle(simulate(swing, u, noise_std=np.full(4, 0.1), rng=rng), cfg) for _ in range(3)]
    avg = average_bundles(bs)
    np.testing.assert_allclose(avg.YF, (bs[0].YF + bs[1].YF + bs[2].YF) / 3)
    assert len(avg.raw) == 3
    other = build_bundle(simulate(swing, generate_pe_input(swing.m, 100, seed=1)), cfg)
    with pytest.raises(ValueError, match="input"):
        average_bundles([bs[0], other])
    with pytest.raises(ValueError):
        average_bundles([])


def test_averaging_reduces_noise(swing):
    noise = NoiseSpec("by-snr", 10.0)
    one = collect(swing, DataConfig(N_coll=1), noise, seed=0)
    many = collect(swing, DataConfig(N_coll=50), noise, seed=0)
    clean = build_bundle(simulate(swing, many.u), DataConfig())
    e1 = np.mean((one.bundle.YF - build_bundle(simulate(swing, one.u), DataConfig()).YF) ** 2)
    e50 = np.mean((many.bundle.YF - clean.YF) ** 2)
    assert e50 < e1 / 10


def test_collect_reproducible(swing):
    a = collect(swing, DataConfig(N_coll=3), NoiseSpec("by-snr", 1e3), seed=9)
    b = collect(swing, DataConfig(N_coll=3), NoiseSpec("by-snr", 1e3), seed=9)
    np.testing.assert_array_equal(a.bundle.YF, b.bundle.YF)
    assert a.pe.ok


def test_constant_input_not_pe():
    res = check_persistency(np.ones((200, 4)), 16)
    assert not res.ok and res.required == 64


def test_pe_order_too_long():
    with pytest.raises(ValueError):
        check_persistency(np.ones((5, 1)), 6)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 30), n=st.integers(1, 3), data=st.data())
def test_hankel_shape_and_entries(T, n, data):
    L = data.draw(st.integers(1, T))
    x = np.arange(T * n, dtype=float).reshape(T, n)
    H = hankel(x, L)
    assert H.shape == (n * L, T - L + 1)
    t = data.draw(st.integers(0, T - L))
    np.testing.assert_array_equal(H[:, t], x[t:t + L].ravel())
