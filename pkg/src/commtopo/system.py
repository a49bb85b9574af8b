"""Networked LTI systems coupled through (noisy) outputs.

Subsystem ``i`` evolves as::

    x_i(k+1) = A_i x_i(k) + B_i u_i(k) + sum_j E_ij y_j(k)
    y_i(k)   = C_i x_i(k) + D_i u_i(k) + v_i(k)

and :class:`NetworkedSystem` assembles the equivalent global model.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .kernels import simulate_lti


class DivergenceError(RuntimeError):
    """Raised when a simulation produces a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"simulation diverged at step {step}")
        self.step = step


def numerical_rank(a: np.ndarray) -> int:
    """Rank with the tolerance ``max(dim) * eps * sigma_max``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    tol = max(a.shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol))


def observability_matrix(A: np.ndarray, C: np.ndarray, steps: int | None = None) -> np.ndarray:
    n = A.shape[0]
    steps = n if steps is None else steps
    blocks = [C]
    for _ in range(steps - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


@dataclass(frozen=True)
class SubsystemModel:
    """Local state-space blocks of one agent.

    ``E`` maps a neighbour index ``j`` to the ``n_i x p_j`` block ``E_ij``;
    missing neighbours are zero coupling.
    """

    index: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("A", "B", "C", "D"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n, m, p = self.A.shape[0], self.B.shape[1], self.C.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"subsystem {self.index}: A must be square, got {self.A.shape}")
        if self.B.shape != (n, m):
            raise ValueError(f"subsystem {self.index}: B has shape {self.B.shape}, expected ({n}, m)")
        if self.C.shape != (p, n):
            raise ValueError(f"subsystem {self.index}: C has shape {self.C.shape}, expected (p, {n})")
        if self.D.shape != (p, m):
            raise ValueError(f"subsystem {self.index}: D has shape {self.D.shape}, expected ({p}, {m})")
        E = {int(j): np.atleast_2d(np.asarray(Eij, dtype=float)) for j, Eij in self.E.items()}
        if self.index in E:
            if np.any(E[self.index] != 0):
                raise ValueError(f"subsystem {self.index}: self-coupling E_ii must be zero")
            del E[self.index]
        for j, Eij in E.items():
            if Eij.shape[0] != n:
                raise ValueError(f"subsystem {self.index}: E_{self.index}{j} must have {n} rows")
        object.__setattr__(self, "E", E)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


class NetworkedSystem:
    """Ordered collection of subsystems and the assembled global model."""

    def __init__(self, subsystems: Sequence[SubsystemModel], strict: bool = True):
        self.subsystems = tuple(subsystems)
        if not self.subsystems:
            raise ValueError("need at least one subsystem")
        for i, s in enumerate(self.subsystems):
            if s.index != i:
                raise ValueError(f"subsystem at position {i} has index {s.index}")
        self.n_i = np.array([s.n for s in self.subsystems])
        self.m_i = np.array([s.m for s in self.subsystems])
        self.p_i = np.array([s.p for s in self.subsystems])
        self.x_off = np.concatenate([[0], np.cumsum(self.n_i)])
        self.u_off = np.concatenate([[0], np.cumsum(self.m_i)])
        self.y_off = np.concatenate([[0], np.cumsum(self.p_i)])
        for s in self.subsystems:
            for j, Eij in s.E.items():
                if not 0 <= j < self.M:
                    raise ValueError(f"subsystem {s.index}: coupling to unknown agent {j}")
                if Eij.shape[1] != self.p_i[j]:
                    raise ValueError(f"E_{s.index}{j} must have {self.p_i[j]} columns")
        self._assemble()
        self.observable = numerical_rank(observability_matrix(self.A, self.C)) == self.n
        self.controllable = numerical_rank(controllability_matrix(self.A, self.B)) == self.n
        if strict and not (self.observable and self.controllable):
            raise ValueError(
                f"global system must be observable and controllable "
                f"(observable={self.observable}, controllable={self.controllable})")

    @property
    def M(self) -> int:
        return len(self.subsystems)

    @property
    def n(self) -> int:
        return int(self.x_off[-1])

    @property
    def m(self) -> int:
        return int(self.u_off[-1])

    @property
    def p(self) -> int:
        return int(self.y_off[-1])

    def _assemble(self):
        n, m, p = self.n, self.m, self.p
        A = np.zeros((n, n))
        B = np.zeros((n, m))
        C = np.zeros((p, n))
        D = np.zeros((p, m))
        E = np.zeros((n, p))
        xs, us, ys = self.xs, self.us, self.ys
        for i, s in enumerate(self.subsystems):
            A[xs(i), xs(i)] = s.A
            B[xs(i), us(i)] = s.B
            C[ys(i), xs(i)] = s.C
            D[ys(i), us(i)] = s.D
            for j, Eij in s.E.items():
                sj = self.subsystems[j]
                A[xs(i), xs(j)] = Eij @ sj.C
                B[xs(i), us(j)] = Eij @ sj.D
                E[xs(i), ys(j)] = Eij
        for a in (A, B, C, D, E):
            a.setflags(write=False)
        self.A, self.B, self.C, self.D, self.E = A, B, C, D, E

    def xs(self, i: int) -> slice:
        return slice(int(self.x_off[i]), int(self.x_off[i + 1]))

    def us(self, i: int) -> slice:
        return slice(int(self.u_off[i]), int(self.u_off[i + 1]))

    def ys(self, i: int) -> slice:
        return slice(int(self.y_off[i]), int(self.y_off[i + 1]))

    def physical_links(self) -> np.ndarray:
        """Boolean M x M matrix, entry (i, j) true when E_ij is nonzero."""
        out = np.zeros((self.M, self.M), dtype=bool)
        for s in self.subsystems:
            for j, Eij in s.E.items():
                out[s.index, j] = bool(np.any(Eij != 0))
        return out

    def lag(self) -> int:
        """Smallest l with rank of the l-step observability matrix equal to n."""
        for ell in range(1, self.n + 1):
            if numerical_rank(observability_matrix(self.A, self.C, ell)) == self.n:
                return ell
        return self.n


# ---------------------------------------------------------------------------
# swing benchmark


@dataclass(frozen=True)
class SwingParams:
    """Linearised swing-equation network, forward-Euler discretised."""

    m: Sequence[float]
    d: Sequence[float]
    k: Sequence[Sequence[float]]
    dt: float = 0.2

    @classmethod
    def default(cls) -> "SwingParams":
        k = np.zeros((4, 4))
        k[0, 1] = k[1, 0] = 1.25
        k[1, 2] = k[2, 1] = 1.2
        k[2, 3] = k[3, 2] = 0.075
        return cls(m=(1.4, 0.8, 0.6, 0.9), d=(0.6, 0.65, 0.75, 0.65), k=k.tolist(), dt=0.2)


def build_swing_benchmark(params: SwingParams, strict: bool = True) -> NetworkedSystem:
    m = np.asarray(params.m, dtype=float)
    d = np.asarray(params.d, dtype=float)
    k = np.asarray(params.k, dtype=float)
    M = m.size
    if m.ndim != 1 or M == 0:
        raise ValueError("m: expected a non-empty vector of inertias")
    if d.shape != (M,):
        raise ValueError(f"d: expected {M} damping values, got shape {d.shape}")
    if k.shape != (M, M):
        raise ValueError(f"k: expected a {M}x{M} coupling matrix, got shape {k.shape}")
    if np.any(m <= 0):
        raise ValueError("m: inertias must be positive")
    if np.any(k < 0):
        raise ValueError("k: couplings must be non-negative")
    if not params.dt > 0:
        raise ValueError("dt: time step must be positive")
    dt = float(params.dt)
    k = k.copy()
    np.fill_diagonal(k, 0.0)
    subs = []
    for i in range(M):
        ki = k[i].sum()
        A = np.array([[1.0, dt], [-ki / m[i] * dt, 1.0 - d[i] / m[i] * dt]])
        B = np.array([[0.0], [1.0 / m[i]]])
        C = np.array([[1.0, 0.0]])
        D = np.zeros((1, 1))
        E = {j: np.array([[0.0], [k[i, j] / m[i] * dt]]) for j in range(M) if j != i and k[i, j] != 0}
        subs.append(SubsystemModel(i, A, B, C, D, E))
    return NetworkedSystem(subs, strict=strict)


def random_system(M: int, rng: np.random.Generator, n_max: int = 2, link_prob: float = 0.5,
                  coupling: float = 0.3, radius: float = 0.9) -> NetworkedSystem:
    """Random stable-ish networked system for oracle cross-checks."""
    for _ in range(100):
        subs = []
        n_i = rng.integers(1, n_max + 1, size=M)
        for i in range(M):
            A = rng.standard_normal((n_i[i], n_i[i]))
            A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
            B = rng.standard_normal((n_i[i], 1))
            C = rng.standard_normal((1, n_i[i]))
            D = np.zeros((1, 1))
            E = {j: coupling * rng.standard_normal((n_i[i], 1))
                 for j in range(M) if j != i and rng.random() < link_prob}
            subs.append(SubsystemModel(i, A, B, C, D, E))
        sys = NetworkedSystem(subs, strict=False)
        if sys.observable and sys.controllable and np.max(np.abs(np.linalg.eigvals(sys.A))) < 1.0:
            return sys
    raise RuntimeError("could not draw an observable, controllable, stable system")


# ---------------------------------------------------------------------------
# signals and simulation


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise model.

    With ``mode="by-snr"`` each output channel gets white Gaussian noise whose
    variance is ``var(clean channel) / snr``, calibrated from a noise-free run
    of the same input.
    """

    mode: str = "none"
    snr: float = 1e3
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in ("none", "by-snr"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.mode == "by-snr" and not self.snr > 0:
            raise ValueError("snr must be positive")


@dataclass(frozen=True)
class Trajectory:
    """Global input/output records, one row per time step."""

    u: np.ndarray
    y: np.ndarray
    m_i: tuple
    p_i: tuple
    y_clean: np.ndarray | None = None

    def __post_init__(self):
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError("input and output sequences differ in length")
        if self.y_clean is not None and self.y_clean.shape != self.y.shape:
            raise ValueError("clean output shape mismatch")

    @property
    def T(self) -> int:
        return self.u.shape[0]

    def u_i(self, i: int) -> np.ndarray:
        o = np.concatenate([[0], np.cumsum(self.m_i)])
        return self.u[:, o[i]:o[i + 1]]

    def y_i(self, i: int) -> np.ndarray:
        o = np.concatenate([[0], np.cumsum(self.p_i)])
        return self.y[:, o[i]:o[i + 1]]

    def to_csv(self, path) -> None:
        m, p = self.u.shape[1], self.y.shape[1]
        header = ["k"] + [f"u_{c + 1}" for c in range(m)] + [f"y_{c + 1}" for c in range(p)]
        if self.y_clean is not None:
            header += [f"yclean_{c + 1}" for c in range(p)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.T):
                row = [k + 1, *map(repr, self.u[k].tolist()), *map(repr, self.y[k].tolist())]
                if self.y_clean is not None:
                    row += list(map(repr, self.y_clean[k].tolist()))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, m_i: Sequence[int], p_i: Sequence[int]) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        m, p = int(sum(m_i)), int(sum(p_i))
        u = data[:, 1:1 + m]
        y = data[:, 1 + m:1 + m + p]
        yc = data[:, 1 + m + p:] if any(h.startswith("yclean_") for h in header) else None
        return cls(u, y, tuple(m_i), tuple(p_i), yc)


def generate_pe_input(m_total: int, T: int, variance: float = 1.0, seed=None) -> np.ndarray:
    """I.i.d. zero-mean Gaussian excitation, shape ``(T, m_total)``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if m_total < 1:
        raise ValueError("m_total must be at least 1")
    if not variance > 0:
        raise ValueError("variance must be positive")
    rng = np.random.default_rng(seed)
    return np.sqrt(variance) * rng.standard_normal((T, m_total))


def calibrate_noise_std(sys: NetworkedSystem, u: np.ndarray, snr: float, x0=None) -> np.ndarray:
    """Per-channel noise std giving ``var(clean) / var(noise) == snr``."""
    clean = simulate(sys, u, x0=x0)
    return np.sqrt(clean.y.var(axis=0) / snr)


def simulate(sys: NetworkedSystem, u: np.ndarray, x0=None, noise: NoiseSpec | None = None,
             noise_std: np.ndarray | None = None, rng: np.random.Generator | None = None) -> Trajectory:
    """Simulate the global model under input ``u`` of shape ``(T, m)``.

    Noise enters the recorded outputs and, through ``E_ij``, the neighbours'
    state updates. ``noise_std`` overrides SNR calibration; ``rng`` overrides
    ``noise.seed``.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[1] != sys.m:
        if u.shape[0] == sys.m:
            raise ValueError(f"input must be (T, {sys.m}); got {u.shape} (transposed?)")
        raise ValueError(f"input has {u.shape[1]} channels, system has {sys.m}")
    T = u.shape[0]
    if T < 1:
        raise ValueError("input length must be at least 1")
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (sys.n,):
        raise ValueError(f"x0 must have length {sys.n}")
    if noise_std is None and noise is not None and noise.mode == "by-snr":
        noise_std = calibrate_noise_std(sys, u, noise.snr, x0)
    if noise_std is None:
        v = np.zeros((T, sys.p))
    else:
        if rng is None:
            rng = np.random.default_rng(None if noise is None else noise.seed)
        v = rng.standard_normal((T, sys.p)) * np.asarray(noise_std, dtype=float)
    _, yc, bad = simulate_lti(sys.A, sys.B, sys.C, sys.D, sys.E, x0, u, v)
    if bad >= 0:
        raise DivergenceError(bad)
    if noise_std is None:
        return Trajectory(u, yc, tuple(sys.m_i), tuple(sys.p_i), yc.copy())
    return Trajectory(u, yc + v, tuple(sys.m_i), tuple(sys.p_i), yc)


# ---------------------------------------------------------------------------
# JSON configuration


def system_from_config(cfg: Mapping) -> NetworkedSystem:
    """Build a system from ``{"swing": {...}}`` or ``{"subsystems": [...]}``.

    Explicit subsystems carry ``A, B, C, D`` as nested lists and an optional
    ``E`` object keyed by neighbour index (0-based, as a string).
    """
    if "swing" in cfg:
        sw = cfg["swing"]
        if sw in ("default", None):
            return build_swing_benchmark(SwingParams.default())
        return build_swing_benchmark(SwingParams(sw["m"], sw["d"], sw["k"], sw.get("dt", 0.2)))
    if "subsystems" in cfg:
        subs = [SubsystemModel(i, s["A"], s["B"], s["C"], s["D"],
                               {int(j): e for j, e in s.get("E", {}).items()})
                for i, s in enumerate(cfg["subsystems"])]
        return NetworkedSystem(subs, strict=cfg.get("strict", True))
    raise ValueError("system config needs a 'swing' or 'subsystems' entry")


def load_system(path) -> NetworkedSystem:
    return system_from_config(json.loads(Path(path).read_text()))
