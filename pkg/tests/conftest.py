import numpy as np
import pytest

from commtopo.data import DataConfig, build_bundle, collect
from commtopo.system import NoiseSpec, SwingParams, build_swing_benchmark, generate_pe_input, simulate


@pytest.fixture(scope="session")
def swing():
    return build_swing_benchmark(SwingParams.default())


@pytest.fixture(scope="session")
def clean_bundle(swing):
    cfg = DataConfig()
    u = generate_pe_input(swing.m, cfg.T, seed=0)
    return build_bundle(simulate(swing, u), cfg)


@pytest.fixture(scope="session")
def noisy_data(swing):
    return collect(swing, DataConfig(), NoiseSpec("by-snr", 1e3), seed=3)


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    monkeypatch.setenv("COMMTOPO_BACKEND", request.param)
    return request.param


def scalar_chain(a=0.5):
    """Two decoupled first-order agents, handy for closed-form answers."""
    from commtopo.system import NetworkedSystem, SubsystemModel
    subs = [SubsystemModel(i, [[a]], [[1.0]], [[1.0]], [[0.0]], {}) for i in range(2)]
    return NetworkedSystem(subs)
