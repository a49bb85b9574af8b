import numpy as np
import pytest

from commtopo import kernels
from commtopo._accel import use_numba
from commtopo.control import MpcConfig, run_mpc
from commtopo.data import hankel
from commtopo.predictor import fit_structured
from commtopo.topology import Topology


def test_env_flag_selects_backend(monkeypatch):
    monkeypatch.setenv("COMMTOPO_BACKEND", "numpy")
    assert not use_numba()
    monkeypatch.setenv("COMMTOPO_BACKEND", "numba")
    assert use_numba()


def test_hankel_matches_loop(backend):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((12, 3))
    H = hankel(x, 4)
    ref = np.array([[x[t + r, c] for t in range(9)] for r in range(4) for c in range(3)])
    np.testing.assert_array_equal(H, ref)


def test_simulate_backends_agree(swing, monkeypatch):
    rng = np.random.default_rng(1)
    u = rng.standard_normal((80, swing.m))
    v = 0.1 * rng.standard_normal((80, swing.p))
    x0 = rng.standard_normal(swing.n)
    args = (swing.A, swing.B, swing.C, swing.D, swing.E, x0, u, v)
    monkeypatch.setenv("COMMTOPO_BACKEND", "numba")
    Xa, ya, da = kernels.simulate_lti(*args)
    monkeypatch.setenv("COMMTOPO_BACKEND", "numpy")
    Xb, yb, db = kernels.simulate_lti(*args)
    assert da == db == -1
    np.testing.assert_allclose(Xa, Xb, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-12)


def test_agent_solve_is_stationary():
    rng = np.random.default_rng(2)
    G = rng.standard_normal((10, 5))
    b = rng.standard_normal(10)
    Q, R = np.diag(rng.uniform(0.5, 2, 10)), np.eye(5)
    for solve in (kernels._agent_solve_nb, kernels._agent_solve_np):
        u, s, g = solve(G, b, Q, R, 1e3)
        # gradient of ||G u + b + s||_Q^2 + ||u||_R^2 + lam ||s||^2, halved
        e = G @ u + b + s
        grad = np.concatenate([G.T @ Q @ e + R @ u, Q @ e + 1e3 * s])
        assert np.linalg.norm(grad) < 1e-8
        assert g < 1e-8


def test_closed_loop_backends_agree(swing, noisy_data, monkeypatch):
    topo = Topology.from_links(4, [(0, 1), (1, 0), (2, 3)])
    K = fit_structured(noisy_data.bundle, topo)
    cfg = MpcConfig(T_sim=40)
    monkeypatch.setenv("COMMTOPO_BACKEND", "numba")
    a = run_mpc(swing, K, topo, cfg, seed=3)
    monkeypatch.setenv("COMMTOPO_BACKEND", "numpy")
    b = run_mpc(swing, K, topo, cfg, seed=3)
    np.testing.assert_allclose(a.U, b.U, rtol=1e-9, atol=1e-12)
    assert a.cost == pytest.approx(b.cost, rel=1e-10)
