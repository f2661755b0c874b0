"""Configuration, experiment registry and result emission."""

from .cli import run_experiment
from .config import EXPERIMENTS, RunConfig, config_hash, validate_config
from .emit import Check, Report, emit_results
from .experiments import REGISTRY, get_experiment

__all__ = [
    "EXPERIMENTS",
    "RunConfig",
    "validate_config",
    "config_hash",
    "Report",
    "Check",
    "emit_results",
    "REGISTRY",
    "get_experiment",
    "run_experiment",
]
