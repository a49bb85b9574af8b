"""Multi-step linear output predictors fitted from Hankel data.

A predictor maps ``[u_ini; y_ini; u_f]`` (each block subsystem-ordered, each
agent's samples stacked time-major) to the predicted ``y_f``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataConfig, HankelBundle, build_bundle
from .system import NetworkedSystem, NoiseSpec, generate_pe_input, numerical_rank, simulate

_KIND_KEYS = {"p-u": "u-past", "p-y": "y-past", "f": "u-future"}


def masked_lstsq(Zs: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm ``K`` minimising ``||Y - K Zs||_F^2`` and the residual.

    Singular values below ``max(dim) * eps * sigma_max`` are treated as zero.
    """
    if Zs.shape[0] == 0:
        return np.zeros((Y.shape[0], 0)), float(np.sum(Y * Y))
    sol, *_ = np.linalg.lstsq(Zs.T, Y.T, rcond=None)
    K = sol.T
    R = Y - K @ Zs
    return K, float(np.sum(R * R))


@dataclass(frozen=True)
class Layout:
    m_i: tuple
    p_i: tuple
    T_ini: int
    N: int

    @classmethod
    def of(cls, bundle: HankelBundle) -> "Layout":
        return cls(tuple(bundle.m_i), tuple(bundle.p_i), bundle.T_ini, bundle.N)

    @property
    def M(self) -> int:
        return len(self.m_i)

    @property
    def n_in(self) -> int:
        return (sum(self.m_i) + sum(self.p_i)) * self.T_ini + sum(self.m_i) * self.N

    @property
    def n_out(self) -> int:
        return sum(self.p_i) * self.N

    def _ranges(self, per, depth, base):
        sizes = np.asarray(per) * depth
        starts = base + np.concatenate([[0], np.cumsum(sizes)[:-1]])
        return [(int(a), int(a + s)) for a, s in zip(starts, sizes)]

    def cols(self, kind: str) -> list:
        m, p = sum(self.m_i), sum(self.p_i)
        if kind == "u-past":
            return self._ranges(self.m_i, self.T_ini, 0)
        if kind == "y-past":
            return self._ranges(self.p_i, self.T_ini, self.T_ini * m)
        if kind == "u-future":
            return self._ranges(self.m_i, self.N, self.T_ini * (m + p))
        raise KeyError(kind)

    def rows(self) -> list:
        return self._ranges(self.p_i, self.N, 0)

    def to_dict(self) -> dict:
        return {"m_i": [int(v) for v in self.m_i], "p_i": [int(v) for v in self.p_i],
                "T_ini": int(self.T_ini), "N": int(self.N)}


@dataclass(frozen=True)
class Predictor:
    """Assembled predictor matrix ``K`` with its block layout.

    ``topology`` is the link matrix the predictor was fitted under (``None``
    for the unstructured fit); ``agent_residuals`` are the training residuals
    of each agent's block row.
    """

    K: np.ndarray
    layout: Layout
    topology: np.ndarray | None = None
    agent_residuals: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.K.shape != (self.layout.n_out, self.layout.n_in):
            raise ValueError(f"K has shape {self.K.shape}, layout expects "
                             f"({self.layout.n_out}, {self.layout.n_in})")
        self.K.setflags(write=False)

    @property
    def residual(self) -> float:
        return float(sum(self.agent_residuals))

    def block(self, i: int, j: int, kind: str) -> np.ndarray:
        """Sub-matrix for agent pair ``(i, j)``; ``kind`` is ``p-u``, ``p-y`` or ``f``."""
        r0, r1 = self.layout.rows()[i]
        c0, c1 = self.layout.cols(_KIND_KEYS[kind])[j]
        return self.K[r0:r1, c0:c1]

    def agent_rows(self, i: int) -> np.ndarray:
        r0, r1 = self.layout.rows()[i]
        return self.K[r0:r1]

    def past_columns(self) -> np.ndarray:
        m, p = sum(self.layout.m_i), sum(self.layout.p_i)
        return self.K[:, :(m + p) * self.layout.T_ini]

    def future_columns(self) -> np.ndarray:
        m, p = sum(self.layout.m_i), sum(self.layout.p_i)
        return self.K[:, (m + p) * self.layout.T_ini:]

    def max_offdiag_entry(self) -> float:
        """Largest magnitude in any block coupling two different agents."""
        out = 0.0
        for i in range(self.layout.M):
            for j in range(self.layout.M):
                if i == j:
                    continue
                for kind in _KIND_KEYS:
                    blk = self.block(i, j, kind)
                    if blk.size:
                        out = max(out, float(np.max(np.abs(blk))))
        return out

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        np.save(prefix.with_suffix(".npy"), np.asarray(self.K))
        hdr = {
            "format": "commtopo-predictor/1",
            "shape": list(self.K.shape),
            "layout": self.layout.to_dict(),
            "topology": None if self.topology is None else np.asarray(self.topology, int).tolist(),
            "agent_residuals": list(self.agent_residuals),
            "index_map": {k: self.layout.cols(v) for k, v in _KIND_KEYS.items()} | {"rows": self.layout.rows()},
        }
        prefix.with_suffix(".json").write_text(json.dumps(hdr, indent=2, sort_keys=True))

    @classmethod
    def load(cls, prefix) -> "Predictor":
        prefix = Path(prefix)
        hdr = json.loads(prefix.with_suffix(".json").read_text())
        lay = hdr["layout"]
        topo = None if hdr["topology"] is None else np.array(hdr["topology"], dtype=bool)
        return cls(np.load(prefix.with_suffix(".npy")),
                   Layout(tuple(lay["m_i"]), tuple(lay["p_i"]), lay["T_ini"], lay["N"]),
                   topo, tuple(hdr["agent_residuals"]))


def fit_unstructured(bundle: HankelBundle) -> Predictor:
    """Least-squares predictor ``K = YF Z^+`` with no communication structure."""
    if bundle.L < 1:
        raise ValueError("empty bundle")
    Z = bundle.Z
    K, _ = masked_lstsq(Z, bundle.YF)
    R = bundle.YF - K @ Z
    res = tuple(float(np.sum(R[bundle.yf_rows(i)] ** 2)) for i in range(bundle.M))
    return Predictor(K, Layout.of(bundle), None, res)


def _neighbours(topo: np.ndarray, i: int) -> list:
    return [i] + [j for j in range(topo.shape[0]) if j != i and topo[i, j]]


def fit_agent(bundle: HankelBundle, i: int, sources, Z: np.ndarray | None = None):
    """Fit agent ``i``'s block row using data of ``sources`` only.

    Returns ``(cols, K_i, residual_i)``; ``cols`` indexes rows of ``Z``.
    """
    Z = bundle.Z if Z is None else Z
    cols = bundle.z_rows(sources)
    K_i, r = masked_lstsq(Z[cols], bundle.YF[bundle.yf_rows(i)])
    return cols, K_i, r


def fit_structured(bundle: HankelBundle, topo) -> Predictor:
    """Least-squares predictor whose ``(i, j)`` blocks vanish where ``topo[i, j]`` is 0.

    Each agent always uses its own data; the diagonal of ``topo`` is ignored.
    """
    topo = np.asarray(topo, dtype=bool)
    if topo.shape != (bundle.M, bundle.M):
        raise ValueError(f"topology is {topo.shape}, bundle has {bundle.M} agents")
    lay = Layout.of(bundle)
    Z = bundle.Z
    K = np.zeros((lay.n_out, lay.n_in))
    res = []
    for i in range(bundle.M):
        cols, K_i, r = fit_agent(bundle, i, _neighbours(topo, i), Z)
        K[bundle.yf_rows(i), cols] = K_i
        res.append(r)
    return Predictor(K, lay, topo.copy(), tuple(res))


@dataclass(frozen=True)
class PredictionWindow:
    u_ini: np.ndarray
    y_ini: np.ndarray
    u_f: np.ndarray
    y_f: np.ndarray | None = None

    def stacked(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.u_ini), np.ravel(self.y_ini), np.ravel(self.u_f)])


def predict(K: Predictor, w: PredictionWindow) -> np.ndarray:
    lay = K.layout
    m, p = sum(lay.m_i), sum(lay.p_i)
    sizes = (m * lay.T_ini, p * lay.T_ini, m * lay.N)
    got = (np.size(w.u_ini), np.size(w.y_ini), np.size(w.u_f))
    if got != sizes:
        raise ValueError(f"window sizes {got} do not match predictor {sizes}")
    return K.K @ w.stacked()


def training_window(bundle: HankelBundle, t: int) -> PredictionWindow:
    """Column ``t`` of a bundle as a prediction window."""
    return PredictionWindow(bundle.UP[:, t], bundle.YP[:, t], bundle.UF[:, t], bundle.YF[:, t])


def validation_windows(K: Predictor, sys: NetworkedSystem, noise: NoiseSpec | None,
                       rng: np.random.Generator, T: int = 200, variance: float = 1.0):
    """Fresh random-input run: noisy regressor ``Z`` and clean targets ``YF``."""
    lay = K.layout
    u = generate_pe_input(sys.m, T, variance, rng)
    traj = simulate(sys, u, noise=noise, rng=rng)
    cfg = DataConfig(lay.T_ini, lay.N, T, 1, 0)
    noisy = build_bundle(traj, cfg, enforce_min_length=False)
    clean_traj = type(traj)(traj.u, traj.y_clean, traj.m_i, traj.p_i, traj.y_clean)
    clean = build_bundle(clean_traj, cfg, enforce_min_length=False)
    return noisy.Z, clean.YF


def validation_mse(K: Predictor, sys: NetworkedSystem, n_windows: int = 50,
                   noise: NoiseSpec | None = None, seed=None, T: int = 200,
                   n_trials: int = 1) -> float:
    """Mean squared error of predictions from noisy history against clean outputs.

    Each trial simulates a fresh ``T``-step random-input run and evaluates
    ``n_windows`` windows drawn without replacement.
    """
    if n_windows < 1 or n_trials < 1:
        raise ValueError("n_windows and n_trials must be positive")
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_trials):
        Z, YF = validation_windows(K, sys, noise, rng, T)
        L = Z.shape[1]
        idx = rng.choice(L, size=min(n_windows, L), replace=False)
        errs.append(np.mean((K.K @ Z[:, idx] - YF[:, idx]) ** 2))
    return float(np.mean(errs))


def structure_diagnostics(K: Predictor) -> dict:
    """Rank of the past-data part and worst violation of causality in ``K_f``.

    Causality asks that no predicted output at step ``t`` depends on a future
    input at a later step ``s > t``.
    """
    lay = K.layout
    rank = numerical_rank(K.past_columns()) if np.any(K.past_columns()) else 0
    worst = 0.0
    for i in range(lay.M):
        for j in range(lay.M):
            blk = K.block(i, j, "f")
            pi, mj = lay.p_i[i], lay.m_i[j]
            for t in range(lay.N):
                for s in range(t + 1, lay.N):
                    sub = blk[t * pi:(t + 1) * pi, s * mj:(s + 1) * mj]
                    if sub.size:
                        worst = max(worst, float(np.max(np.abs(sub))))
    return {"past_rank": rank, "noncausality": worst}
