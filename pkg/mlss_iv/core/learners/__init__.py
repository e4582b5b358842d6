"""
First-stage learners for the nonparametric nuisances
"""

from .base import LEARNER_KINDS, LearnerSpec, Predictor, fit, oos_r2, predict

__all__ = ["LEARNER_KINDS", "LearnerSpec", "Predictor", "fit", "predict", "oos_r2"]
