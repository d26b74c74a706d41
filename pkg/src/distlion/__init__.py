"""Distributed Lion simulator: binary-update distributed training with bit-exact bandwidth accounting."""

from .core_math import Hyperparams, dist_to_feasible, sign
from .config import RunConfig, ProblemSpec, CompressionConfig
from .dist_sim import RunLog, RoundLog, Simulation, run_training
from .metrics import kkt_score, phase1_report, summarize

__version__ = "0.1.0"

__all__ = [
    "Hyperparams",
    "RunConfig",
    "ProblemSpec",
    "CompressionConfig",
    "Simulation",
    "RunLog",
    "RoundLog",
    "run_training",
    "sign",
    "dist_to_feasible",
    "kkt_score",
    "phase1_report",
    "summarize",
]
