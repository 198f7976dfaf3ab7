"""Planner and simulator for training DAG-structured multimodal models under temporal-spatial GPU multiplexing."""

from tsmux.errors import TsmuxError
from tsmux.gahc import SolverConfig, solve
from tsmux.model import ClusterSpec, DeploymentPlan, ModelGraph, make_graph, validate_plan
from tsmux.perf import InterferenceModel, ScalingSurface, fit_interference
from tsmux.simulator import SimConfig, simulate, simulate_baseline
from tsmux.stage_eval import stage_eval

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec",
    "DeploymentPlan",
    "InterferenceModel",
    "ModelGraph",
    "ScalingSurface",
    "SimConfig",
    "SolverConfig",
    "TsmuxError",
    "fit_interference",
    "make_graph",
    "simulate",
    "simulate_baseline",
    "solve",
    "stage_eval",
    "validate_plan",
]
