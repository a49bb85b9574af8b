"""Hankel data matrices, repeated-experiment averaging and excitation checks."""
from __future__ import annotations

import json
from functools import cached_property
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernels import hankel_matrix
from .system import (NetworkedSystem, NoiseSpec, Trajectory, calibrate_noise_std,
                     generate_pe_input, numerical_rank, simulate)

KINDS = ("u-past", "y-past", "u-future")


class DataLengthError(ValueError):
    """Dataset too short for the excitation-order requirement."""


def hankel(x: np.ndarray, L: int) -> np.ndarray:
    """Block-Hankel matrix of depth ``L``.

    ``x`` is ``(T,)`` or ``(T, n)``; the result is ``(n*L, T-L+1)`` with
    column ``t`` holding ``x[t], ..., x[t+L-1]`` stacked.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T = x.shape[0]
    if not 1 <= L <= T:
        raise ValueError(f"depth L={L} must satisfy 1 <= L <= T={T}")
    return hankel_matrix(x, L)


@dataclass(frozen=True)
class DataConfig:
    T_ini: int = 3
    N: int = 5
    T: int = 200
    N_coll: int = 50
    n_guess: int = 8

    def __post_init__(self):
        if self.T_ini < 1 or self.N < 1 or self.N_coll < 1:
            raise ValueError("T_ini, N and N_coll must be positive")
        if self.T < self.T_ini + self.N:
            raise ValueError("T must be at least T_ini + N")

    @property
    def pe_order(self) -> int:
        return self.T_ini + self.N + self.n_guess

    def T_min(self, m_total: int) -> int:
        return (m_total + 1) * (self.T_ini + self.N + self.n_guess) - 1

    def check_length(self, m_total: int) -> None:
        if self.T < self.T_min(m_total):
            raise DataLengthError(
                f"T={self.T} is below T_min=(m+1)(T_ini+N+n)-1={self.T_min(m_total)}; "
                f"the input cannot be persistently exciting of order {self.pe_order}")


@dataclass(frozen=True)
class HankelBundle:
    """Past/future data matrices, rows grouped by subsystem.

    ``Z = [UP; YP; UF]`` is the regressor and ``YF`` the target. ``raw`` keeps
    the per-experiment bundles when this one is an average.
    """

    UP: np.ndarray
    YP: np.ndarray
    UF: np.ndarray
    YF: np.ndarray
    m_i: tuple
    p_i: tuple
    T_ini: int
    N: int
    raw: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        L = self.UP.shape[1]
        if any(a.shape[1] != L for a in (self.YP, self.UF, self.YF)):
            raise ValueError("column counts differ across data matrices")
        m, p = sum(self.m_i), sum(self.p_i)
        expect = {"UP": self.T_ini * m, "YP": self.T_ini * p, "UF": self.N * m, "YF": self.N * p}
        for name, rows in expect.items():
            if getattr(self, name).shape[0] != rows:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {rows}")

    @property
    def M(self) -> int:
        return len(self.m_i)

    @property
    def L(self) -> int:
        return self.UP.shape[1]

    @property
    def Z(self) -> np.ndarray:
        return np.vstack([self.UP, self.YP, self.UF])

    def _offsets(self, per_agent: Sequence[int], depth: int, base: int) -> list:
        sizes = np.asarray(per_agent) * depth
        starts = base + np.concatenate([[0], np.cumsum(sizes)[:-1]])
        return [(int(a), int(a + s)) for a, s in zip(starts, sizes)]

    @cached_property
    def index_map(self) -> dict:
        """Row ranges of ``Z`` per kind and agent, plus ``YF`` rows per agent."""
        m, p = sum(self.m_i), sum(self.p_i)
        return {
            "u-past": self._offsets(self.m_i, self.T_ini, 0),
            "y-past": self._offsets(self.p_i, self.T_ini, self.T_ini * m),
            "u-future": self._offsets(self.m_i, self.N, self.T_ini * (m + p)),
            "y-future": self._offsets(self.p_i, self.N, 0),
        }

    def z_rows(self, agents: Sequence[int]) -> np.ndarray:
        """Indices of ``Z`` rows carrying data of ``agents`` (kind-major order)."""
        imap = self.index_map
        agents = sorted(agents)
        return np.array([r for kind in KINDS for j in agents for r in range(*imap[kind][j])], dtype=np.intp)

    def yf_rows(self, i: int) -> slice:
        return slice(*self.index_map["y-future"][i])

    # -- serialisation ---------------------------------------------------

    def header(self, config: dict | None = None) -> dict:
        return {
            "format": "commtopo-bundle/1",
            "shapes": {k: list(getattr(self, k).shape) for k in ("UP", "YP", "UF", "YF")},
            "m_i": [int(v) for v in self.m_i], "p_i": [int(v) for v in self.p_i],
            "T_ini": int(self.T_ini), "N": int(self.N), "L": int(self.L),
            "index_map": self.index_map,
            "config": config or {},
        }

    def save(self, prefix, config: dict | None = None) -> None:
        """Write ``<prefix>.npy`` (``[UP; YP; UF; YF]``, float64) and ``<prefix>.json``."""
        prefix = Path(prefix)
        np.save(prefix.with_suffix(".npy"), np.vstack([self.UP, self.YP, self.UF, self.YF]))
        prefix.with_suffix(".json").write_text(json.dumps(self.header(config), indent=2, sort_keys=True))

    @classmethod
    def load(cls, prefix) -> "HankelBundle":
        prefix = Path(prefix)
        hdr = json.loads(prefix.with_suffix(".json").read_text())
        data = np.load(prefix.with_suffix(".npy"))
        rows = np.cumsum([0] + [hdr["shapes"][k][0] for k in ("UP", "YP", "UF", "YF")])
        parts = [data[rows[i]:rows[i + 1]] for i in range(4)]
        return cls(*parts, tuple(hdr["m_i"]), tuple(hdr["p_i"]), hdr["T_ini"], hdr["N"])


def build_bundle(data: Trajectory, cfg: DataConfig, enforce_min_length: bool = True) -> HankelBundle:
    """Partition a trajectory into subsystem-ordered past/future Hankel blocks.

    Column ``t`` holds the past window ``t .. t+T_ini-1`` and the future
    window ``t+T_ini .. t+T_ini+N-1`` (0-based), so ``L = T - T_ini - N + 1``.
    """
    if data.T != cfg.T:
        raise ValueError(f"trajectory length {data.T} differs from configured T={cfg.T}")
    if enforce_min_length:
        cfg.check_length(int(sum(data.m_i)))
    T, Ti, N = cfg.T, cfg.T_ini, cfg.N
    L = T - Ti - N + 1
    M = len(data.m_i)

    def blocks(getter, depth, start):
        return np.vstack([hankel(getter(i)[start:start + L + depth - 1], depth) for i in range(M)])

    return HankelBundle(
        UP=blocks(data.u_i, Ti, 0),
        YP=blocks(data.y_i, Ti, 0),
        UF=blocks(data.u_i, N, Ti),
        YF=blocks(data.y_i, N, Ti),
        m_i=tuple(data.m_i), p_i=tuple(data.p_i), T_ini=Ti, N=N,
    )


def average_bundles(bundles: Sequence[HankelBundle]) -> HankelBundle:
    """Mean of the output blocks over experiments run with one input sequence."""
    if not bundles:
        raise ValueError("no bundles to average")
    first = bundles[0]
    for b in bundles[1:]:
        if (b.m_i, b.p_i, b.T_ini, b.N) != (first.m_i, first.p_i, first.T_ini, first.N):
            raise ValueError("bundles have different layouts")
        if b.YP.shape != first.YP.shape:
            raise ValueError("bundles have different dimensions")
        if not (np.array_equal(b.UP, first.UP) and np.array_equal(b.UF, first.UF)):
            raise ValueError("input blocks differ: experiments did not share the input sequence")
    if len(bundles) == 1:
        return first
    YP = np.mean([b.YP for b in bundles], axis=0)
    YF = np.mean([b.YF for b in bundles], axis=0)
    return HankelBundle(first.UP, YP, first.UF, YF, first.m_i, first.p_i, first.T_ini, first.N,
                        raw=tuple(bundles))


@dataclass(frozen=True)
class PEResult:
    ok: bool
    rank: int
    required: int

    def to_dict(self) -> dict:
        return asdict(self)


def check_persistency(u: np.ndarray, order: int) -> PEResult:
    """Is ``u`` (shape ``(T, m)``) persistently exciting of the given order?"""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[0] < order:
        raise ValueError(f"input length {u.shape[0]} is shorter than the order {order}")
    required = u.shape[1] * order
    r = numerical_rank(hankel(u, order))
    return PEResult(ok=r == required, rank=r, required=required)


@dataclass(frozen=True)
class Dataset:
    """Averaged bundle plus everything needed to reproduce it."""

    bundle: HankelBundle
    u: np.ndarray
    noise_std: np.ndarray | None
    pe: PEResult
    trajectories: tuple = field(default=(), repr=False)


def collect(sys: NetworkedSystem, cfg: DataConfig, noise: NoiseSpec | None = None,
            seed=None, keep_trajectories: bool = False) -> Dataset:
    """Excite ``sys`` ``cfg.N_coll`` times with one Gaussian input and average.

    The noise level is calibrated once from the noise-free response, then each
    experiment draws fresh noise from a single generator seeded by ``seed``.
    """
    cfg.check_length(sys.m)
    rng = np.random.default_rng(seed)
    u = generate_pe_input(sys.m, cfg.T, seed=rng)
    pe = check_persistency(u, cfg.pe_order)
    std = None
    if noise is not None and noise.mode == "by-snr":
        std = calibrate_noise_std(sys, u, noise.snr)
    trajs, bundles = [], []
    for _ in range(cfg.N_coll):
        tr = simulate(sys, u, noise_std=std, rng=rng)
        bundles.append(build_bundle(tr, cfg))
        if keep_trajectories:
            trajs.append(tr)
        if std is None:
            break  # noise-free repeats are identical
    return Dataset(average_bundles(bundles), u, std, pe, tuple(trajs))
