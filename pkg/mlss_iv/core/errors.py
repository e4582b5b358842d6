"""
Exception hierarchy shared by the estimation core, the Monte Carlo harness and the CLI
"""

from __future__ import annotations

from typing import Iterable, List


class MLSSError(Exception):
    """Root of every error raised by mlss_iv."""


class DataError(MLSSError, ValueError):
    """Input data violates the dataset schema or invariants."""


class ConfigError(MLSSError, ValueError):
    """A run, experiment or learner configuration is invalid.

    All problems found during validation are kept in ``problems`` so callers
    can report them at once instead of one per run.
    """

    def __init__(self, problems: Iterable[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems: List[str] = list(problems)
        super().__init__("; ".join(self.problems))


class LearnerError(MLSSError, ValueError):
    """A first-stage learner could not be fitted or evaluated."""


class DimensionMismatchError(LearnerError):
    """Features passed to a predictor do not match the fitted dimension."""


class DegenerateDesignError(MLSSError, ValueError):
    """A regression design is rank deficient and no fallback applies."""


class WeakIdentificationError(MLSSError, ArithmeticError):
    """The plug-in Jacobian G-hat is singular or ill-conditioned."""

    def __init__(self, condition_number: float, message: str | None = None):
        self.condition_number = float(condition_number)
        if message is None:
            message = (
                f"G-hat is ill-conditioned (condition number {self.condition_number:.3g}); "
                "the instrument is weak or degenerate, use Anderson-Rubin inference instead"
            )
        super().__init__(message)
