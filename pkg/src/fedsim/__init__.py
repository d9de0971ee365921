"""Federated learning simulator with FedAvg, FedPer, FedMA-lite and FedDist aggregation."""
from .aggregators import FedAvg, FedDist, FedMA, FedPer, make_strategy
from .config import ExperimentConfig, load_config, parse_arch
from .engine import EngineConfig, init_server, run_round
from .nn import LayerKind, LayerSpec, ModelArchitecture, TrainConfig, WeightSet

__version__ = "0.1.0"

__all__ = [
    "EngineConfig",
    "ExperimentConfig",
    "FedAvg",
    "FedDist",
    "FedMA",
    "FedPer",
    "LayerKind",
    "LayerSpec",
    "ModelArchitecture",
    "TrainConfig",
    "WeightSet",
    "init_server",
    "load_config",
    "make_strategy",
    "parse_arch",
    "run_round",
]
