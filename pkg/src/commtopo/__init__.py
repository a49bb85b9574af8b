"""Communication topology design for data-driven networked control."""

__version__ = "0.1.0"

from .data import DataConfig, HankelBundle, build_bundle, check_persistency, collect  # noqa: E402
from .predictor import Predictor, fit_structured, fit_unstructured, validation_mse  # noqa: E402
from .system import NetworkedSystem, NoiseSpec, SwingParams, build_swing_benchmark, simulate  # noqa: E402
from .topology import OptimizerConfig, Topology, bounds_report, optimize  # noqa: E402
from .control import MpcConfig, random_topology, run_mpc, value_of_communication  # noqa: E402

__all__ = [
    "DataConfig", "HankelBundle", "build_bundle", "check_persistency", "collect",
    "Predictor", "fit_structured", "fit_unstructured", "validation_mse",
    "NetworkedSystem", "NoiseSpec", "SwingParams", "build_swing_benchmark", "simulate",
    "OptimizerConfig", "Topology", "bounds_report", "optimize",
    "MpcConfig", "random_topology", "run_mpc", "value_of_communication",
]
