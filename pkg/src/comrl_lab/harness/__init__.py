"""Configuration, experiment protocols and the command-line interface."""
from .config import ConfigError, ExperimentConfig
from .pipeline import (run_alpha_sweep, run_pipeline, run_quality_sweep, run_spurious_probe,
                       run_taskood_modelbased)

__all__ = ["ConfigError", "ExperimentConfig", "run_pipeline", "run_quality_sweep", "run_alpha_sweep",
           "run_taskood_modelbased", "run_spurious_probe"]
