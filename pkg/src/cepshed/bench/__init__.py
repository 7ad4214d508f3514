"""Experiment harness: calibrate, train, overload, compare with ground truth."""

from .config import ExperimentConfig, SweepSpec, load_config
from .experiment import (
    CellResult,
    inject_processing_cost,
    run_cell,
    run_experiment,
    summarize,
)

__all__ = [
    "CellResult",
    "ExperimentConfig",
    "SweepSpec",
    "inject_processing_cost",
    "load_config",
    "run_cell",
    "run_experiment",
    "summarize",
]
