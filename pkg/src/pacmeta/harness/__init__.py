"""Experiment orchestration for the sinusoid study."""

from pacmeta.harness.config import ConfigError, ExperimentConfig, from_dict, load_config
from pacmeta.harness.runner import (IncompleteGridError, bound_sweep, crossval_select,
                                    run_grid, summarize_bounds)

__all__ = ["ConfigError", "ExperimentConfig", "IncompleteGridError", "bound_sweep",
           "crossval_select", "from_dict", "load_config", "run_grid", "summarize_bounds"]
