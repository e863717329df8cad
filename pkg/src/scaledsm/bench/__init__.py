"""Experiment harness: configuration, drivers and the command-line interface."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import NumericalFailure, RunReport, cmd_grid, cmd_rip, cmd_run, replay

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "NumericalFailure",
    "RunReport",
    "cmd_grid",
    "cmd_rip",
    "cmd_run",
    "load_config",
    "parse_config",
    "replay",
]
