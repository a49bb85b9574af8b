"""Wall-clock comparison of the numba kernels against the numpy fallback.

Usage: ``python benchmarks/bench_kernels.py [--repeat 5]``. Compilation is
triggered once before timing, so the numba column measures steady state.
"""
import argparse
import os
import timeit

import numpy as np

from commtopo import kernels
from commtopo.control import MpcConfig, run_mpc
from commtopo.data import DataConfig, collect
from commtopo.predictor import fit_structured
from commtopo.system import NoiseSpec, SwingParams, build_swing_benchmark
from commtopo.topology import Topology


def cases():
    sys = build_swing_benchmark(SwingParams.default())
    rng = np.random.default_rng(0)
    T = 2000
    u = rng.standard_normal((T, sys.m))
    v = 0.01 * rng.standard_normal((T, sys.p))
    x0 = np.zeros(sys.n)
    ds = collect(sys, DataConfig(N_coll=5), NoiseSpec("by-snr", 1e3), seed=0)
    topo = Topology.from_links(4, [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)])
    K = fit_structured(ds.bundle, topo)
    sig = rng.standard_normal((T, 4))
    return {
        "simulate T=2000": lambda: kernels.simulate_lti(sys.A, sys.B, sys.C, sys.D, sys.E, x0, u, v),
        "hankel 2000x4, L=16": lambda: kernels.hankel_matrix(sig, 16),
        "closed loop T_sim=100": lambda: run_mpc(sys, K, topo, MpcConfig(T_sim=100), seed=1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    results = {}
    for backend in ("numba", "numpy"):
        os.environ["COMMTOPO_BACKEND"] = backend
        for name, fn in cases().items():
            fn()  # warm-up / compile
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(name, {})[backend] = best
    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speed-up':>10}")
    for name, r in results.items():
        print(f"{name:<24}{1e3 * r['numba']:>12.3f}{1e3 * r['numpy']:>12.3f}{r['numpy'] / r['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
