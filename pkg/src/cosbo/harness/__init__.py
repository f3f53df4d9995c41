"""Experiment harness: configuration files, runs, sweeps and reports."""

from .config import SCENARIOS, ConfigError, ExperimentConfig, load_config
from .runner import generate_dataset, load_dataset, run_sweep, run_training

__all__ = ["SCENARIOS", "ConfigError", "ExperimentConfig", "load_config", "generate_dataset", "load_dataset",
           "run_sweep", "run_training"]
