"""Experiment runner: config files, named experiments, reports, CLI."""

from .config import ExperimentConfig, load_config
from .experiments import NAMED_EXPERIMENTS, run_experiment
from .report import MetricsReport, RunMetrics

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "NAMED_EXPERIMENTS",
    "RunMetrics",
    "load_config",
    "run_experiment",
]
