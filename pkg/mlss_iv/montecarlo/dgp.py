"""
Simulation designs with a nonlinear (XOR-like) first stage, with and
without exogenous covariates, plus their oracle nuisance functions.
"""

from __future__ import annotations

from typing import Callable, Dict

import attrs
import numpy as np
from scipy import special, stats

from mlss_iv.core.data_model import Dataset
from mlss_iv.core.errors import DataError
from mlss_iv.core.learners import LearnerSpec

TRUE_TAU = 1.0
#: Covariate loadings X = A W + V.
COVARIATE_LOADINGS = np.array([[1.0, 0.4, 0.3], [0.5, 2.0, 0.2]])
COVARIATE_EFFECTS = np.array([0.1, 0.3])
FLIP_PROBABILITY = 0.3


@attrs.frozen(eq=False)
class SimDataset:
    """A simulated Dataset together with the quantities only a simulation knows."""

    dataset: Dataset
    propensity: np.ndarray
    u: np.ndarray
    v: np.ndarray
    tau: float = TRUE_TAU
    truths: Dict[str, Callable[[np.ndarray], np.ndarray]] = attrs.field(factory=dict)

    def oracle_spec(self) -> LearnerSpec:
        """A learner that returns the true conditional means for every nuisance the DGP knows."""
        return LearnerSpec(kind="oracle", truth=dict(self.truths))


def xor_mean(w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
    """μ(W₀, W₁): 0.1 outside the unit disk, sgn(W₀W₁)(W₀² + W₁²) inside; sgn(0) = 0."""
    r2 = w0 ** 2 + w1 ** 2
    return np.where(r2 > 1.0, 0.1, np.sign(w0 * w1) * r2)


def propensity(w: np.ndarray) -> np.ndarray:
    """P(D = 1 | W) = σ(3μ(W₀, W₁))·sin(2W₂)²."""
    w = np.atleast_2d(w)
    return special.expit(3.0 * xor_mean(w[:, 0], w[:, 1])) * np.sin(2.0 * w[:, 2]) ** 2


def outcome_scale(w: np.ndarray) -> np.ndarray:
    """v(W) = 0.1 + σ((W₀ + W₁)W₂)."""
    w = np.atleast_2d(w)
    return 0.1 + special.expit((w[:, 0] + w[:, 1]) * w[:, 2])


def error_variance(w: np.ndarray) -> np.ndarray:
    """E[U² | W] for U = 0.5(D - p)|Z₁| + √0.75·Z₂."""
    p = propensity(w)
    return 0.25 * p * (1.0 - p) + 0.75


def _check_n(n: int) -> None:
    if n < 2:
        raise DataError(f"simulated datasets need at least 2 observations, got n={n}")


def _draw_base(n: int, rng: np.random.Generator):
    # draw order is part of the reproducibility contract
    w = rng.standard_normal((n, 3))
    uniform_d = rng.random(n)
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    p = propensity(w)
    d = (uniform_d < p).astype(float)
    u = 0.5 * (d - p) * np.abs(z1) + np.sqrt(1.0 - 0.25) * z2
    return w, p, d, u


def dgp_nocov(n: int, seed: int) -> SimDataset:
    """Y = D + v(W)·U with three standard-normal instruments and no covariates."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    w, p, d, u = _draw_base(n, rng)
    v = outcome_scale(w)
    y = TRUE_TAU * d + v * u
    ds = Dataset(y=y, d=d[:, None], x=np.zeros((n, 0)), w=w)
    truths = {
        "d": propensity,
        "u2": lambda w_: outcome_scale(w_) ** 2 * error_variance(w_),
    }
    return SimDataset(dataset=ds, propensity=p, u=v * u, v=v, truths=truths)


def _treatment_mean_cov(w: np.ndarray) -> np.ndarray:
    # E[D̃|W] = p + P(X₀ > 0 | W)·0.3·(1 - 2p)
    p = propensity(w)
    share_flipped = stats.norm.cdf(np.atleast_2d(w) @ COVARIATE_LOADINGS[0])
    return p + share_flipped * FLIP_PROBABILITY * (1.0 - 2.0 * p)


def _covariate_mean(w: np.ndarray) -> np.ndarray:
    return np.atleast_2d(w) @ COVARIATE_LOADINGS.T


def dgp_cov(n: int, seed: int) -> SimDataset:
    """
    Adds covariates X = AW + V; when X₀ > 0 the treatment is flipped with
    probability 0.3, and Y = D̃ + X′(0.1, 0.3)′ + U.
    """
    _check_n(n)
    rng = np.random.default_rng(seed)
    w, p, d, u = _draw_base(n, rng)
    x = w @ COVARIATE_LOADINGS.T + rng.standard_normal((n, 2))
    flip = (x[:, 0] > 0.0) & (rng.random(n) < FLIP_PROBABILITY)
    d_tilde = np.where(flip, 1.0 - d, d)
    y = TRUE_TAU * d_tilde + x @ COVARIATE_EFFECTS + u
    ds = Dataset(y=y, d=d_tilde[:, None], x=x, w=w)
    truths = {
        "d": _treatment_mean_cov,
        "x": _covariate_mean,
        "u2": error_variance,
        "xu2": lambda w_: _covariate_mean(w_) * error_variance(w_)[:, None],
    }
    return SimDataset(dataset=ds, propensity=p, u=u, v=np.ones(n), truths=truths)


DGPS = {"dgp_nocov": dgp_nocov, "dgp_cov": dgp_cov}
