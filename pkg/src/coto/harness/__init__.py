"""Experiment harness: configuration, arms, evaluation, plots and the CLI."""

from .config import ARMS, ConfigError, RunConfig, load_config
from .experiment import EvalReport, run_eval, run_train
from .plots import emit_plots, parse_svg

__all__ = ["ARMS", "ConfigError", "RunConfig", "load_config", "EvalReport", "run_eval", "run_train", "emit_plots", "parse_svg"]
