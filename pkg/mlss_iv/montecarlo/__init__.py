"""
Simulation designs and the Monte Carlo experiment harness
"""

from .dgp import DGPS, SimDataset, dgp_cov, dgp_nocov
from .experiment import ExperimentConfig, ExperimentReport, load_experiment_config, run_experiment
from .mte import mte_weights
from .summaries import coverage, extra_sample_error, winsorized_sd

__all__ = [
    "DGPS",
    "SimDataset",
    "dgp_nocov",
    "dgp_cov",
    "ExperimentConfig",
    "ExperimentReport",
    "load_experiment_config",
    "run_experiment",
    "mte_weights",
    "coverage",
    "extra_sample_error",
    "winsorized_sd",
]
