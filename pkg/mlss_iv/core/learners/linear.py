"""
Least-squares learners: ols, polynomial expansion + ols, and the
discretized cell-mean learner.
"""

from __future__ import annotations

import itertools
import logging
from typing import List, Optional, Sequence

import numpy as np

from mlss_iv.core.errors import LearnerError
from mlss_iv.core.linalg import RIDGE_SCALE, least_squares

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (-1.0, 0.0, 1.0)
MAX_CELLS = 1 << 22


def polynomial_features(x: np.ndarray, degree: int, interactions: bool) -> np.ndarray:
    """
    Expand the columns of ``x`` into monomials of total degree 1..``degree``.

    Without interactions only pure powers are kept (levels, squares, cubes);
    with interactions every monomial up to ``degree`` is included. No constant
    column is added.
    """
    x = np.asarray(x, dtype=float)
    q = x.shape[1]
    columns: List[np.ndarray] = []
    for deg in range(1, degree + 1):
        if interactions:
            for combo in itertools.combinations_with_replacement(range(q), deg):
                columns.append(np.prod(x[:, combo], axis=1))
        else:
            for j in range(q):
                columns.append(x[:, j] ** deg)
    if not columns:
        return np.zeros((x.shape[0], 0))
    return np.column_stack(columns)


class OLSModel:
    """Linear regression with intercept; ridge fallback on rank deficiency."""

    def __init__(self, ridge_scale: float = RIDGE_SCALE):
        self.ridge_scale = ridge_scale
        self.coef_: Optional[np.ndarray] = None
        self.warnings: List[str] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "OLSModel":
        design = np.column_stack([np.ones(x.shape[0]), x])
        result = least_squares(design, y, ridge_scale=self.ridge_scale)
        if result.ridge_used:
            msg = f"ols: rank-deficient design (rank {result.rank} of {design.shape[1]}), ridge fallback used"
            logger.warning(msg)
            self.warnings.append(msg)
        self.coef_ = result.coef
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.coef_[0] + x @ self.coef_[1:]


class PolynomialModel:
    """Polynomial expansion followed by :class:`OLSModel`."""

    def __init__(self, degree: int = 2, interactions: bool = False, ridge_scale: float = RIDGE_SCALE):
        self.degree = degree
        self.interactions = interactions
        self._ols = OLSModel(ridge_scale=ridge_scale)

    @property
    def warnings(self) -> List[str]:
        return self._ols.warnings

    def fit(self, x: np.ndarray, y: np.ndarray) -> "PolynomialModel":
        self._ols.fit(polynomial_features(x, self.degree, self.interactions), y)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self._ols.predict(polynomial_features(x, self.degree, self.interactions))


def cell_index(x: np.ndarray, thresholds: Sequence[Sequence[float]]) -> np.ndarray:
    """Mixed-radix id of the threshold cell holding each row."""
    ids = np.zeros(x.shape[0], dtype=np.int64)
    for j, cuts in enumerate(thresholds):
        ids = ids * (len(cuts) + 1) + np.digitize(x[:, j], cuts)
    return ids


def resolve_thresholds(thresholds, q: int) -> List[List[float]]:
    """Broadcast a single threshold list to every column, or validate a per-column list."""
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    thresholds = list(thresholds)
    if thresholds and not isinstance(thresholds[0], (list, tuple)):
        per_column = [list(map(float, thresholds))] * q
    else:
        per_column = [list(map(float, t)) for t in thresholds]
    if len(per_column) != q:
        raise LearnerError(f"discretized: {len(per_column)} threshold lists for {q} feature columns")
    for cuts in per_column:
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise LearnerError(f"discretized: thresholds must be strictly increasing, got {cuts}")
    return per_column


class DiscretizedModel:
    """Cell means over the full interaction of per-column threshold bins.

    Cells without training rows predict the global training mean.
    """

    def __init__(self, thresholds=None):
        self.thresholds = thresholds
        self.warnings: List[str] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "DiscretizedModel":
        self.cuts_ = resolve_thresholds(self.thresholds, x.shape[1])
        n_cells = int(np.prod([len(c) + 1 for c in self.cuts_]))
        if n_cells > MAX_CELLS:
            raise LearnerError(f"discretized: {n_cells} cells exceeds the limit of {MAX_CELLS}")
        ids = cell_index(x, self.cuts_)
        self.global_mean_ = float(np.mean(y))
        counts = np.bincount(ids, minlength=n_cells)
        sums = np.bincount(ids, weights=y, minlength=n_cells)
        means = np.full(n_cells, self.global_mean_)
        occupied = counts > 0
        means[occupied] = sums[occupied] / counts[occupied]
        self.cell_means_ = means
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.cell_means_[cell_index(x, self.cuts_)]

