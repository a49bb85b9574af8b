"""Joint choice of communication links and a structured predictor.

The objective ``sum_ij c_ij delta_ij + ||YF - K Z||_F^2`` separates over the
block rows of ``K``: agent ``i``'s row only sees the links ``(i, j)`` into it.
The exact solver therefore enumerates the ``2^(M-1)`` neighbour sets of each
agent independently. Full enumeration of all topologies and a big-M
branch-and-bound are kept as cross-checks.
"""
from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .data import HankelBundle
from .predictor import Layout, Predictor, fit_agent, fit_structured

MODES = ("decomposed-exact", "exhaustive", "branch-and-bound")


class ConsistencyError(RuntimeError):
    """Two solution paths that must agree did not."""


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Topology:
    """Directed link matrix; ``adj[i, j]`` means agent ``j`` sends to agent ``i``."""

    adj: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adj)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("topology must be a square matrix")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("topology entries must be boolean")
        a = a.astype(bool)
        if np.any(np.diag(a)):
            raise ValueError("topology diagonal must be zero (self-access is implicit)")
        a.setflags(write=False)
        object.__setattr__(self, "adj", a)

    def __array__(self, dtype=None, copy=None):
        return self.adj.astype(dtype) if dtype is not None else self.adj

    @property
    def M(self) -> int:
        return self.adj.shape[0]

    @property
    def n_links(self) -> int:
        return int(self.adj.sum())

    def links(self) -> list:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adj))]

    @classmethod
    def full(cls, M: int) -> "Topology":
        return cls(~np.eye(M, dtype=bool))

    @classmethod
    def empty(cls, M: int) -> "Topology":
        return cls(np.zeros((M, M), dtype=bool))

    @classmethod
    def from_links(cls, M: int, links) -> "Topology":
        a = np.zeros((M, M), dtype=bool)
        for i, j in links:
            a[i, j] = True
        return cls(a)

    def __eq__(self, other):
        return isinstance(other, Topology) and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash(self.adj.tobytes())

    def key(self) -> str:
        return "".join("1" if v else "0" for v in self.adj.ravel())


def link_costs(M: int, c) -> np.ndarray:
    """Validated ``M x M`` link-cost matrix; a scalar gives uniform costs."""
    C = np.full((M, M), float(c)) if np.isscalar(c) else np.array(c, dtype=float)
    if C.shape != (M, M):
        raise ValueError(f"cost matrix must be {M}x{M}")
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise ValueError("link costs must be finite and non-negative")
    np.fill_diagonal(C, 0.0)
    return C


@dataclass(frozen=True)
class OptimizerConfig:
    big_m: float = 5.0
    mode: str = "decomposed-exact"
    tie_tol: float = 1e-9
    verify: bool = False

    def __post_init__(self):
        if not self.big_m > 0:
            raise ValueError("big_m must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class OptimizationResult:
    topology: Topology
    predictor: Predictor
    objective: float
    residual: float
    link_cost: float
    per_agent: tuple = field(default=(), repr=False)
    big_m_exceeded: bool = False
    mode: str = "decomposed-exact"

    @property
    def n_links(self) -> int:
        return self.topology.n_links

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "topology": self.topology.adj.astype(int).tolist(),
            "links": self.n_links,
            "objective": self.objective,
            "residual": self.residual,
            "link_cost": self.link_cost,
            "big_m_exceeded": self.big_m_exceeded,
            "max_offdiag_entry": self.predictor.max_offdiag_entry(),
            "per_agent": list(self.per_agent),
        }


@dataclass(frozen=True)
class BoundsReport:
    """Training-error sandwich for an optimised topology.

    ``lower`` is the fully connected residual ``||YF (I - Pi)||^2``, ``upper``
    adds the cost of every dropped link, and ``window_bound`` scales ``upper``
    by the largest eigenvalue of the output weight ``Q``.
    """

    lower: float
    dropped_cost: float
    upper: float
    achieved: float
    lambda_q_max: float
    window_bound: float

    @property
    def slack_lower(self) -> float:
        return self.achieved - self.lower

    @property
    def slack_upper(self) -> float:
        return self.upper - self.achieved

    def to_dict(self) -> dict:
        return {"lower": self.lower, "dropped_cost": self.dropped_cost, "upper": self.upper,
                "achieved": self.achieved, "lambda_q_max": self.lambda_q_max,
                "window_bound": self.window_bound,
                "slack_lower": self.slack_lower, "slack_upper": self.slack_upper}


# ---------------------------------------------------------------------------
# objective evaluation


def _agent_value(bundle, Z, costs, i, nbrs):
    """Link cost, residual and total for agent ``i`` receiving from ``nbrs``."""
    lc = 0.0
    for j in nbrs:
        lc += float(costs[i, j])
    _, _, r = fit_agent(bundle, i, [i, *nbrs], Z)
    return lc, r, lc + r


def objective(bundle: HankelBundle, costs, topo) -> dict:
    """Residual, link cost and their sum for a fixed topology."""
    topo = topo if isinstance(topo, Topology) else Topology(np.asarray(topo))
    costs = link_costs(bundle.M, costs)
    pred = fit_structured(bundle, topo)
    lc_total = res_total = total = 0.0
    for i in range(bundle.M):
        lc = 0.0
        for j in range(bundle.M):
            if topo.adj[i, j]:
                lc += float(costs[i, j])
        r = pred.agent_residuals[i]
        lc_total += lc
        res_total += r
        total += lc + r
    return {"residual": res_total, "link_cost": lc_total, "total": total, "predictor": pred}


def _better(cand, best, tol):
    """Tie rule: lower value, then fewer links, then lexicographically smaller links."""
    if best is None:
        return True
    if cand[0] < best[0] - tol:
        return True
    if cand[0] > best[0] + tol:
        return False
    if len(cand[1]) != len(best[1]):
        return len(cand[1]) < len(best[1])
    return cand[1] < best[1]


def _result(bundle, costs, adj, mode, big_m, per_agent, total=None, predictor=None):
    topo = Topology(adj)
    pred = fit_structured(bundle, topo) if predictor is None else predictor
    residual = sum(a["residual"] for a in per_agent)
    lc = sum(a["link_cost"] for a in per_agent)
    if total is None:
        total = 0.0
        for a in per_agent:
            total += a["link_cost"] + a["residual"]
    return OptimizationResult(topo, pred, total, residual, lc, tuple(per_agent),
                              pred.max_offdiag_entry() > big_m, mode)


# ---------------------------------------------------------------------------
# solvers


def _solve_decomposed(bundle, costs, cfg):
    M, Z = bundle.M, bundle.Z
    adj = np.zeros((M, M), dtype=bool)
    per_agent = []
    total = 0.0
    for i in range(M):
        others = [j for j in range(M) if j != i]
        best = None
        for size in range(M):
            for nbrs in itertools.combinations(others, size):
                lc, r, v = _agent_value(bundle, Z, costs, i, nbrs)
                cand = (v, [(i, j) for j in nbrs], lc, r)
                if _better(cand, best, cfg.tie_tol):
                    best = cand
        for _, j in best[1]:
            adj[i, j] = True
        per_agent.append({"agent": i, "neighbours": [j for _, j in best[1]],
                          "residual": best[3], "link_cost": best[2]})
        total += best[0]
    return _result(bundle, costs, adj, "decomposed-exact", cfg.big_m, per_agent, total)


def _solve_exhaustive(bundle, costs, cfg, max_agents: int = 4):
    M, Z = bundle.M, bundle.Z
    if M > max_agents:
        raise ValueError(f"exhaustive enumeration is limited to {max_agents} agents")
    pairs = [(i, j) for i in range(M) for j in range(M) if i != j]
    best = None
    for mask in range(1 << len(pairs)):
        links = [pairs[b] for b in range(len(pairs)) if mask >> b & 1]
        total = 0.0
        agents = []
        for i in range(M):
            nbrs = [j for (a, j) in links if a == i]
            lc, r, v = _agent_value(bundle, Z, costs, i, nbrs)
            total += v
            agents.append({"agent": i, "neighbours": nbrs, "residual": r, "link_cost": lc})
        cand = (total, sorted(links), agents)
        if _better(cand, best, cfg.tie_tol):
            best = cand
    adj = np.zeros((M, M), dtype=bool)
    for i, j in best[1]:
        adj[i, j] = True
    return _result(bundle, costs, adj, "exhaustive", cfg.big_m, best[2], best[0])


def optimize(bundle: HankelBundle, costs, cfg: OptimizerConfig | None = None) -> OptimizationResult:
    """Globally optimal topology and predictor for the given link costs.

    With ``cfg.verify`` the decomposed solution is checked against full
    enumeration and :class:`ConsistencyError` is raised on disagreement.
    """
    cfg = cfg or OptimizerConfig()
    costs = link_costs(bundle.M, costs)
    if cfg.mode == "exhaustive":
        return _solve_exhaustive(bundle, costs, cfg)
    if cfg.mode == "branch-and-bound":
        return _solve_bnb(bundle, costs, cfg)
    res = _solve_decomposed(bundle, costs, cfg)
    if cfg.verify:
        check_against_oracle(bundle, costs, cfg, res)
    return res


def check_against_oracle(bundle, costs, cfg, res=None) -> dict:
    """Compare decomposed and exhaustive solutions; raise on mismatch."""
    costs = link_costs(bundle.M, costs)
    res = res or _solve_decomposed(bundle, costs, cfg)
    ora = _solve_exhaustive(bundle, costs, cfg)
    if res.topology == ora.topology:
        if res.objective != ora.objective:
            raise ConsistencyError(f"objective mismatch: decomposed {res.objective!r} "
                                   f"vs exhaustive {ora.objective!r}")
    elif top2_gap(bundle, costs) > cfg.tie_tol or abs(res.objective - ora.objective) > cfg.tie_tol:
        raise ConsistencyError("argmin topologies differ although the optimum is not tied")
    return {"objective": res.objective, "same_topology": res.topology == ora.topology}


def top2_gap(bundle, costs) -> float:
    """Difference between the two best objective values over all topologies."""
    M, Z = bundle.M, bundle.Z
    # the runner-up topology differs from the optimum in one agent's row
    second_gap = np.inf
    for i in range(M):
        others = [j for j in range(M) if j != i]
        vals = sorted(_agent_value(bundle, Z, costs, i, nbrs)[2]
                      for size in range(M) for nbrs in itertools.combinations(others, size))
        if len(vals) > 1:
            second_gap = min(second_gap, vals[1] - vals[0])
    return second_gap


def cost_sweep(bundle: HankelBundle, cost_values, cfg: OptimizerConfig | None = None) -> list:
    """One optimisation per uniform link cost."""
    return [optimize(bundle, float(c), cfg) for c in cost_values]


# ---------------------------------------------------------------------------
# bounds


def _validate_q(Q, dim):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape != (dim, dim):
        raise ValueError(f"Q must be {dim}x{dim}")
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    eig = np.linalg.eigvalsh(Q)
    if eig[0] < -1e-12 * max(1.0, abs(eig[-1])):
        raise ValueError("Q must be positive semidefinite")
    return Q, float(max(eig[-1], 0.0))


def bounds_report(bundle: HankelBundle, costs, result: OptimizationResult, Q=None,
                  tol: float = 1e-9) -> BoundsReport:
    """Lower/upper bounds on the training prediction error of ``result``.

    Raises :class:`ConsistencyError` if the achieved residual leaves
    ``[lower - tol, upper + tol]``.
    """
    costs = link_costs(bundle.M, costs)
    Z = bundle.Z
    Pi = np.linalg.pinv(Z) @ Z
    R = bundle.YF - bundle.YF @ Pi
    lower = float(np.sum(R * R))
    off = ~np.eye(bundle.M, dtype=bool)
    dropped = float(np.sum(costs[off & ~result.topology.adj]))
    upper = lower + dropped
    dim = bundle.YF.shape[0]
    if Q is None:
        lam = 1.0
    else:
        _, lam = _validate_q(Q, dim)
    rep = BoundsReport(lower, dropped, upper, result.residual, lam, lam * upper)
    if rep.slack_lower < -tol or rep.slack_upper < -tol:
        raise ConsistencyError(f"bound sandwich violated: {rep.to_dict()}")
    return rep


@dataclass(frozen=True)
class WindowBoundCheck:
    max_train: float
    max_fresh: float
    bound: float
    ok: bool
    fresh_violations: int
    n_train: int
    n_fresh: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def window_bound_check(K: Predictor, sys, Q, n_samples: int, seed, report: BoundsReport,
                       bundle: HankelBundle | None = None, noise=None) -> WindowBoundCheck:
    """Weighted single-window prediction errors against ``lambda_max(Q) * upper``.

    ``ok`` reflects training columns of ``bundle`` (the windows the bound is
    derived for). Fresh windows simulated on ``sys`` are counted separately.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    Q, lam = _validate_q(Q, K.layout.n_out)
    bound = lam * report.upper
    rng = np.random.default_rng(seed)

    def weighted(E):
        return np.einsum("it,ij,jt->t", E, Q, E)

    max_train, n_train, ok = 0.0, 0, True
    if bundle is not None:
        idx = rng.choice(bundle.L, size=min(n_samples, bundle.L), replace=False)
        E = bundle.YF[:, idx] - K.K @ bundle.Z[:, idx]
        w = weighted(E)
        max_train, n_train = float(w.max()), len(idx)
        ok = bool(np.all(w <= bound))
    max_fresh, viol, n_fresh = 0.0, 0, 0
    if sys is not None:
        from .predictor import validation_windows
        Zv, Yv = validation_windows(K, sys, noise, rng)
        idx = rng.choice(Zv.shape[1], size=min(n_samples, Zv.shape[1]), replace=False)
        w = weighted(Yv[:, idx] - K.K @ Zv[:, idx])
        max_fresh, viol, n_fresh = float(w.max()), int(np.sum(w > bound)), len(idx)
    return WindowBoundCheck(max_train, max_fresh, bound, ok, viol, n_train, n_fresh)


# ---------------------------------------------------------------------------
# big-M branch and bound


def _agent_qp(Zs_qr, Y, blocks, delta, big_m, cost_row):
    """Per-agent big-M program over the columns in ``Zs_qr``.

    ``blocks`` maps neighbour ``j`` to its column slice; ``delta`` maps ``j``
    to a fixed 0/1 value or ``None`` when relaxed to ``[0, 1]``.
    """
    import cvxpy as cp

    Qz, Rz = Zs_qr
    YQ = Y @ Qz
    base = float(np.sum((Y - YQ @ Qz.T) ** 2))
    Kv = cp.Variable((Y.shape[0], Rz.shape[0]))
    free = [j for j, d in delta.items() if d is None]
    dv = cp.Variable(len(free)) if free else None
    cons, lc = [], 0.0
    for j, sl in blocks.items():
        if delta[j] is None:
            d = dv[free.index(j)]
            lc = lc + cost_row[j] * d
        else:
            d = float(delta[j])
            lc = lc + cost_row[j] * d
        cons += [Kv[:, sl] <= big_m * d, Kv[:, sl] >= -big_m * d]
    if dv is not None:
        cons += [dv >= 0, dv <= 1]
    prob = cp.Problem(cp.Minimize(lc + cp.sum_squares(YQ - Kv @ Rz.T)), cons)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"QP solve failed: {prob.status}")
    dvals = {j: (float(dv.value[free.index(j)]) if delta[j] is None else float(delta[j]))
             for j in blocks}
    return float(prob.value) + base, Kv.value, dvals


def _bnb_agent(bundle, Z, costs, i, cfg, int_tol=1e-6):
    M = bundle.M
    others = [j for j in range(M) if j != i]
    Y = bundle.YF[bundle.yf_rows(i)]
    incumbent = (np.inf, None)
    heap = [(-np.inf, 0, {j: None for j in others})]
    counter = 1
    nodes = 0

    def setup(delta):
        active = [i] + [j for j in others if delta[j] != 0]
        cols = bundle.z_rows(active)
        Zs = Z[cols]
        Qz, Rz = np.linalg.qr(Zs.T)
        # column positions of each neighbour inside Zs
        pos = {}
        for j in active:
            if j == i:
                continue
            mine = set(bundle.z_rows([j]).tolist())
            pos[j] = np.array([k for k, c in enumerate(cols) if c in mine])
        return (Qz, Rz), pos, cols

    while heap:
        lb, _, delta = heapq.heappop(heap)
        if lb >= incumbent[0] - cfg.tie_tol:
            continue
        nodes += 1
        qr, pos, cols = setup(delta)
        sub = {j: (None if delta[j] is None else delta[j]) for j in pos}
        val, Kv, dv = _agent_qp(qr, Y, pos, sub, cfg.big_m, costs[i])
        if val >= incumbent[0] - cfg.tie_tol:
            continue
        frac = {j: d for j, d in dv.items() if int_tol < d < 1 - int_tol}
        if not frac:
            fixed = {j: (1 if dv.get(j, 0.0) > 0.5 else 0) for j in others}
            incumbent = (val, fixed)
            continue
        # rounding heuristic for an upper bound
        rounded = {j: (delta[j] if delta[j] is not None else int(dv.get(j, 0.0) > 0.5)) for j in others}
        qr2, pos2, _ = setup(rounded)
        val2, _, _ = _agent_qp(qr2, Y, pos2, {j: rounded[j] for j in pos2}, cfg.big_m, costs[i])
        if val2 < incumbent[0] - cfg.tie_tol:
            incumbent = (val2, rounded)
        j_branch = max(frac, key=lambda j: min(frac[j], 1 - frac[j]))
        for v in (1, 0):
            child = dict(delta)
            child[j_branch] = v
            heapq.heappush(heap, (val, counter, child))
            counter += 1
    best_val, fixed = incumbent
    nbrs = [j for j in others if fixed[j] == 1]
    # final solve to recover the constrained block row
    qr, pos, cols = setup({j: fixed[j] for j in others})
    # Zs = Rz^T Qz^T, so the QP variable is the block row itself
    _, K_i, _ = _agent_qp(qr, Y, pos, {j: 1 for j in pos}, cfg.big_m, costs[i])
    resid = float(np.sum((Y - K_i @ Z[cols]) ** 2))
    lc = float(sum(costs[i, j] for j in nbrs))
    return nbrs, cols, K_i, resid, lc, nodes


def _solve_bnb(bundle, costs, cfg):
    M, Z = bundle.M, bundle.Z
    lay = Layout.of(bundle)
    adj = np.zeros((M, M), dtype=bool)
    Kfull = np.zeros((lay.n_out, lay.n_in))
    per_agent, res = [], []
    for i in range(M):
        nbrs, cols, K_i, r, lc, nodes = _bnb_agent(bundle, Z, costs, i, cfg)
        for j in nbrs:
            adj[i, j] = True
        Kfull[bundle.yf_rows(i), cols] = K_i
        res.append(r)
        per_agent.append({"agent": i, "neighbours": nbrs, "residual": r, "link_cost": lc, "nodes": nodes})
    pred = Predictor(Kfull, lay, adj.copy(), tuple(res))
    return _result(bundle, costs, adj, "branch-and-bound", cfg.big_m, per_agent, predictor=pred)


def results_to_json(results, path, extra=None) -> None:
    payload = {"results": [r.to_dict() for r in results]}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
