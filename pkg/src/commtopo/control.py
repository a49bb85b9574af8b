"""Closed-loop evaluation with non-cooperative predictive control.

Every agent solves an unconstrained quadratic problem over its own future
inputs and an output slack, using its block row of the predictor. Neighbours'
future inputs come from the plans they sent at the previous step, shifted by
one step with the last entry held.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import HankelBundle
from .kernels import closed_loop
from .predictor import Predictor, fit_structured
from .system import NetworkedSystem, NoiseSpec, calibrate_noise_std, generate_pe_input
from .topology import OptimizerConfig, Topology, optimize

DEFAULT_COSTS = (0.001, 0.3, 1.0, 3.0, 10.0, 20.0, 50.0, 150.0, 400.0, 1000.0, 1e5)


@dataclass(frozen=True)
class MpcConfig:
    """Weights and run length of the closed-loop experiment.

    ``q`` and ``r`` are per-step output and input weights (a scalar or one
    value per channel). ``x0`` of ``None`` draws a random unit-norm initial
    state from the run seed.
    """

    q: float | tuple = 1.0
    r: float | tuple = 1e-2
    lam_s: float = 1e3
    T_sim: int = 100
    x0: tuple | None = None

    def __post_init__(self):
        if self.T_sim < 1:
            raise ValueError("T_sim must be at least 1")
        if self.lam_s < 0:
            raise ValueError("lam_s must be non-negative")
        if np.any(np.asarray(self.q) < 0):
            raise ValueError("output weight must be positive semidefinite")
        if np.any(np.asarray(self.r) <= 0):
            raise ValueError("input weight must be positive definite")

    def weights(self, p: int, m: int):
        q = np.broadcast_to(np.asarray(self.q, dtype=float), (p,)).copy()
        r = np.broadcast_to(np.asarray(self.r, dtype=float), (m,)).copy()
        return q, r


@dataclass(frozen=True)
class ClosedLoopResult:
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    Y_meas: np.ndarray
    cost: float
    agent_costs: tuple
    topology: str
    seed: object
    diverged: int = -1
    slack: np.ndarray = field(default=None, repr=False)
    grad: np.ndarray = field(default=None, repr=False)
    T_ini: int = 0

    @property
    def ok(self) -> bool:
        return self.diverged < 0

    def to_rows(self) -> list:
        """One row per step: ``k, u..., y...`` (clean outputs)."""
        return [[k, *self.U[k].tolist(), *self.Y[k].tolist()] for k in range(self.U.shape[0])]


def _offsets(sizes):
    o = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return np.stack([o[:-1], o[1:]], axis=1)


def loop_layout(K: Predictor) -> dict:
    lay = K.layout
    return {
        "yrow": np.array(lay.rows(), dtype=np.int64),
        "up": np.array(lay.cols("u-past"), dtype=np.int64),
        "yp": np.array(lay.cols("y-past"), dtype=np.int64),
        "uf": np.array(lay.cols("u-future"), dtype=np.int64),
        "uch": _offsets(lay.m_i),
        "ych": _offsets(lay.p_i),
    }


def _horizon_weights(K: Predictor, q, r):
    """Block-diagonal horizon weights matching the agent-major, time-major rows."""
    lay = K.layout
    yo, uo = _offsets(lay.p_i), _offsets(lay.m_i)
    Qd = np.concatenate([np.tile(q[a:b], lay.N) for a, b in yo])
    Rd = np.concatenate([np.tile(r[a:b], lay.N) for a, b in uo])
    return np.diag(Qd), np.diag(Rd)


def _noise_std(sys, noise, noise_std):
    if noise_std is not None:
        return np.asarray(noise_std, dtype=float)
    if noise is None or noise.mode == "none":
        return None
    # calibrate on a reference excitation when no data-collection value is given
    u = generate_pe_input(sys.m, 200, seed=0 if noise.seed is None else noise.seed)
    return calibrate_noise_std(sys, u, noise.snr)


def run_mpc(sys: NetworkedSystem, K: Predictor, topo, cfg: MpcConfig | None = None,
            noise: NoiseSpec | None = None, seed=None, noise_std=None, audit=None) -> ClosedLoopResult:
    """Simulate ``T_ini`` zero-input warm-up steps followed by ``T_sim`` MPC steps.

    The realised cost sums ``||y||_q^2 + ||u||_r^2`` of the clean outputs over
    the MPC steps. A non-finite state ends the run with ``cost = inf``.
    """
    cfg = cfg or MpcConfig()
    topo = topo if isinstance(topo, Topology) else Topology(np.asarray(topo, dtype=bool))
    lay = K.layout
    if tuple(lay.m_i) != tuple(sys.m_i) or tuple(lay.p_i) != tuple(sys.p_i):
        raise ValueError("predictor layout does not match the system")
    if K.topology is not None and np.any(topo.adj & ~np.asarray(K.topology, dtype=bool)):
        raise ValueError("predictor was fitted under a sparser topology")
    q, r = cfg.weights(sys.p, sys.m)
    Qg, Rg = _horizon_weights(K, q, r)
    rng = np.random.default_rng(seed)
    if cfg.x0 is None:
        x0 = rng.standard_normal(sys.n)
        x0 /= np.linalg.norm(x0)
    else:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (sys.n,):
            raise ValueError(f"x0 must have length {sys.n}")
    T_tot = lay.T_ini + cfg.T_sim
    std = _noise_std(sys, noise, noise_std)
    V = np.zeros((T_tot, sys.p)) if std is None else rng.standard_normal((T_tot, sys.p)) * std
    X, U, Yc, Ym, slack, grad, div = closed_loop(
        sys.A, sys.B, sys.C, sys.D, sys.E, x0, V, K.K, topo.adj, Qg, Rg, cfg.lam_s,
        loop_layout(K), lay.T_ini, lay.N, cfg.T_sim, audit=audit)
    if div >= 0:
        return ClosedLoopResult(X, U, Yc, Ym, math.inf, tuple([math.inf] * sys.M), topo.key(),
                                seed, int(div), slack, grad, lay.T_ini)
    s = slice(lay.T_ini, T_tot)
    per = []
    for i in range(sys.M):
        ys, us = sys.ys(i), sys.us(i)
        per.append(float(np.sum(Yc[s, ys] ** 2 * q[ys]) + np.sum(U[s, us] ** 2 * r[us])))
    total = 0.0
    for c in per:
        total += c
    return ClosedLoopResult(X, U, Yc, Ym, total, tuple(per), topo.key(), seed, -1,
                            slack, grad, lay.T_ini)


def random_topology(M: int, n_links: int, seed=None) -> Topology:
    """Uniform sample among ``M x M`` link matrices with exactly ``n_links`` links."""
    pairs = [(i, j) for i in range(M) for j in range(M) if i != j]
    if not 0 <= n_links <= len(pairs):
        raise ValueError(f"n_links must lie in [0, {len(pairs)}]")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pairs), size=n_links, replace=False)
    return Topology.from_links(M, [pairs[k] for k in pick])


def _mean(values) -> float:
    # identical runs must average to exactly that value
    if all(v == values[0] for v in values):
        return float(values[0])
    return float(np.mean(values))


def _one_seed(args) -> list:
    bundle, sys, costs, mcfg, ocfg, noise, noise_std, n_random, seed = args
    rows = []
    M = bundle.M
    empty = run_mpc(sys, fit_structured(bundle, Topology.empty(M)), Topology.empty(M), mcfg,
                    noise, seed=[seed, 0], noise_std=noise_std)
    for ci, c in enumerate(costs):
        res = optimize(bundle, c, ocfg)
        opt = run_mpc(sys, res.predictor, res.topology, mcfg, noise, seed=[seed, 0], noise_std=noise_std)
        J_rand = []
        for k in range(n_random):
            topo = random_topology(M, res.n_links, seed=[seed, ci, k])
            if topo == res.topology:
                J_rand.append(opt.cost)
                continue
            K = fit_structured(bundle, topo)
            J_rand.append(run_mpc(sys, K, topo, mcfg, noise, seed=[seed, 0], noise_std=noise_std).cost)
        jr = _mean(J_rand)
        ratio = 1.0 if opt.cost == jr else opt.cost / jr
        rows.append({"seed": seed, "c": float(c), "links": res.n_links, "topology": res.topology.key(),
                     "pred_cost": res.residual, "objective": res.objective,
                     "J_opt": opt.cost, "J_rand": jr, "J_empty": empty.cost, "ratio": ratio})
    return rows


def value_of_communication(bundles, sys: NetworkedSystem, costs=DEFAULT_COSTS,
                           cfg: MpcConfig | None = None, n_random: int = 10, n_seeds: int | None = None,
                           opt_cfg: OptimizerConfig | None = None, noise: NoiseSpec | None = None,
                           noise_std=None, seeds=None, jobs: int = 1) -> dict:
    """Control cost of optimised against random topologies with equal link count.

    ``bundles`` holds one training bundle per seed (a single bundle is reused).
    The closed-loop seed of a row is shared by its optimised, random and empty
    runs, so all three see the same initial state and noise. Returns per-run
    ``rows``, per-link-count ``by_links`` and per-cost ``by_cost`` averages and
    a ``summary`` with the rank correlation and minimum ratio.
    """
    if isinstance(bundles, HankelBundle):
        bundles = [bundles]
    n_seeds = len(bundles) if n_seeds is None else n_seeds
    if n_random < 1 or n_seeds < 1:
        raise ValueError("n_random and n_seeds must be at least 1")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)[:n_seeds]
    if len(seeds) < n_seeds:
        raise ValueError("fewer seeds than n_seeds")
    cfg = cfg or MpcConfig()
    tasks = [(bundles[k % len(bundles)], sys, list(costs), cfg, opt_cfg, noise,
              noise_std[k % len(noise_std)] if isinstance(noise_std, list) else noise_std,
              n_random, seeds[k]) for k in range(n_seeds)]
    if jobs > 1 and n_seeds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_one_seed, tasks))
    else:
        chunks = [_one_seed(t) for t in tasks]
    rows = [r for ch in chunks for r in ch]
    return summarize(rows)


def _group(rows, key):
    out = {}
    for r in rows:
        out.setdefault(r[key], []).append(r)
    return out


def summarize(rows: list) -> dict:
    """Aggregate value-of-communication rows by link count and by cost."""
    by_links = []
    for n, grp in sorted(_group(rows, "links").items()):
        by_links.append({"links": n, "n": len(grp),
                         "pred_cost": _mean([g["pred_cost"] for g in grp]),
                         "J_opt": _mean([g["J_opt"] for g in grp]),
                         "J_rand": _mean([g["J_rand"] for g in grp]),
                         "ratio": _mean([g["ratio"] for g in grp])})
    by_cost = []
    for c, grp in sorted(_group(rows, "c").items()):
        by_cost.append({"c": c, "n": len(grp),
                        "links": _mean([g["links"] for g in grp]),
                        "pred_cost": _mean([g["pred_cost"] for g in grp]),
                        "J_opt": _mean([g["J_opt"] for g in grp]),
                        "ratio": _mean([g["ratio"] for g in grp])})
    corr = float("nan")
    if len(by_cost) >= 2:
        a = [b["pred_cost"] for b in by_cost]
        b = [b["J_opt"] for b in by_cost]
        if np.ptp(a) > 0 and np.ptp(b) > 0:
            corr = float(stats.spearmanr(a, b).statistic)
    ratios = [b["ratio"] for b in by_links]
    summary = {"spearman_pred_vs_J": corr,
               "min_ratio": min(ratios) if ratios else float("nan"),
               "n_rows": len(rows)}
    return {"rows": rows, "by_links": by_links, "by_cost": by_cost, "summary": summary}
