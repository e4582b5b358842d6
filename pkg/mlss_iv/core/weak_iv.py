"""
Weak-instrument-robust inference: per-fold Anderson-Rubin statistics,
closed-form AR confidence sets for a scalar treatment, their Bonferroni
intersection across folds, grid evaluation and Wald intervals.
"""

from __future__ import annotations

import logging
import math
from typing import Iterable, List, Optional, Sequence, Tuple

import attrs
import numpy as np
from scipy import stats

from mlss_iv.core.data_model import Dataset
from mlss_iv.core.errors import ConfigError, DataError
from mlss_iv.core.estimator import EstimateResult
from mlss_iv.core.instruments import InstrumentMatrix
from mlss_iv.core.linalg import residualize

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]

FINITE_INTERVAL = "finite_interval"
TWO_RAYS = "two_rays"
WHOLE_LINE = "whole_line"
EMPTY = "empty"
SHAPES = (FINITE_INTERVAL, TWO_RAYS, WHOLE_LINE, EMPTY)

#: Ω with a larger condition number makes AR(τ) infinite.
OMEGA_COND_LIMIT = 1e12
#: Quadratic coefficients below this multiple of their scale count as zero.
COEF_TOL = 1e-12


@attrs.frozen(eq=False)
class ARFoldInput:
    """One fold's rows: off-fold instrument υ̂⁽ʲ⁾, outcome, treatments and [1, X]."""

    upsilon_hat: np.ndarray
    y: np.ndarray
    d: np.ndarray
    xbar: np.ndarray
    fold: int = 0

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p_d(self) -> int:
        return int(self.d.shape[1])


def _shape_of(intervals: Sequence[Interval]) -> str:
    if not intervals:
        return EMPTY
    if len(intervals) == 1 and intervals[0] == (-math.inf, math.inf):
        return WHOLE_LINE
    if any(math.isinf(lo) or math.isinf(hi) for lo, hi in intervals):
        return TWO_RAYS
    return FINITE_INTERVAL


@attrs.frozen
class ARSet:
    """
    A sorted union of disjoint closed intervals over τ, with ±inf endpoints
    allowed. ``alpha`` is the test level each piece was built at.

    A single fold's set has at most two pieces. Intersecting fold sets can
    leave more, e.g. two rays with a bounded piece between them.
    ``shape`` tags boundedness: any infinite endpoint short of the whole line
    is ``two_rays``, and ``finite_interval`` means every piece is bounded.
    """

    intervals: Tuple[Interval, ...]
    alpha: float
    shape: str = attrs.field()
    warnings: Tuple[str, ...] = ()
    fold_sets: Tuple["ARSet", ...] = ()

    @shape.default
    def _default_shape(self) -> str:
        return _shape_of(self.intervals)

    @property
    def empty(self) -> bool:
        return not self.intervals

    @property
    def finite(self) -> bool:
        return self.shape == FINITE_INTERVAL

    def contains(self, tau: float) -> bool:
        return any(lo <= tau <= hi for lo, hi in self.intervals)


def ar_fold_inputs(inst: InstrumentMatrix, ds: Dataset) -> List[ARFoldInput]:
    """Split the data and the cross-fitted instrument into per-fold AR inputs."""
    if inst.n != ds.n:
        raise DataError(f"instrument has {inst.n} rows, dataset has {ds.n}")
    out = []
    for j in range(inst.k):
        rows = inst.fold_rows(j)
        out.append(ARFoldInput(
            upsilon_hat=inst.excluded[rows],
            y=ds.y[rows],
            d=ds.d[rows],
            xbar=ds.xbar[rows],
            fold=j,
        ))
    return out


class _Partialled:
    """In-fold pieces of AR(τ), all linear in τ: Ũ(τ) = ỹ - d̃τ."""

    def __init__(self, inp: ARFoldInput):
        n, cols = inp.xbar.shape
        if n <= cols:
            raise DataError(f"fold {inp.fold}: {n} rows cannot be partialled on {cols} columns of [1, X]")
        ups = np.asarray(inp.upsilon_hat, dtype=float)
        if ups.ndim == 1:
            ups = ups[:, None]
        norms = np.sqrt(np.sum(ups ** 2, axis=0))
        self.degenerate = bool(np.any(norms == 0.0))
        # unit in-fold sum of squares per column; AR is invariant to the scale
        self.ups = ups / np.where(norms == 0.0, 1.0, norms)
        self.ups_t, _ = residualize(self.ups, inp.xbar)
        self.y_t, _ = residualize(np.asarray(inp.y, dtype=float), inp.xbar)
        self.d_t, _ = residualize(np.asarray(inp.d, dtype=float), inp.xbar)
        self.n = n


def _ar_values(part: _Partialled, taus: np.ndarray) -> np.ndarray:
    # taus: (G, p_d)
    u = part.y_t[:, None] - part.d_t @ taus.T                       # (n, G)
    v = part.ups.T @ u / math.sqrt(part.n)                          # (p_d, G)
    omega = np.einsum("ig,ia,ib->gab", u ** 2, part.ups_t, part.ups_t) / part.n
    out = np.full(taus.shape[0], math.inf)
    if part.degenerate:
        return out
    conds = np.linalg.cond(omega)
    ok = np.isfinite(conds) & (conds <= OMEGA_COND_LIMIT)
    if np.any(ok):
        vv = v.T[ok]
        sol = np.linalg.solve(omega[ok], vv[:, :, None])[:, :, 0]
        out[ok] = np.maximum(np.sum(vv * sol, axis=1), 0.0)
    return out


def _as_tau_grid(taus, p_d: int) -> np.ndarray:
    grid = np.asarray(taus, dtype=float)
    if grid.ndim == 0:
        grid = grid.reshape(1, 1)
    elif grid.ndim == 1:
        grid = grid[:, None] if p_d == 1 else grid[None, :]
    if grid.shape[1] != p_d:
        raise ValueError(f"tau values have {grid.shape[1]} components, expected {p_d}")
    return grid


def ar_statistic(inp: ARFoldInput, tau0) -> float:
    """
    AR_j(τ₀) = V′Ω⁻¹V with V = n̄^{-1/2} Σ υ̂ᵢŨᵢ(τ₀) and Ω = n̄⁻¹ Σ Ũᵢ(τ₀)² υ̃ᵢυ̃ᵢ′.

    Ũ and υ̃ are partialled on [1, X] inside the fold; V uses the
    unpartialled υ̂. A singular Ω gives +inf.

    Raises:
        DataError: when the fold has no more rows than columns of [1, X]
    """
    value = float(_ar_values(_Partialled(inp), _as_tau_grid(tau0, inp.p_d))[0])
    if math.isinf(value):
        logger.warning("fold %d: AR covariance is singular at tau0, statistic set to inf", inp.fold)
    return value


def ar_grid(inp: ARFoldInput, taus) -> np.ndarray:
    """AR_j evaluated at every grid point; works for any number of treatments."""
    return _ar_values(_Partialled(inp), _as_tau_grid(taus, inp.p_d))


def ar_set_grid(inp: ARFoldInput, taus, alpha: float) -> np.ndarray:
    """Boolean acceptance indicator of AR_j(τ) ≤ χ²_{p_d, 1-α} over the grid."""
    _check_alpha(alpha)
    return ar_grid(inp, taus) <= stats.chi2.ppf(1.0 - alpha, inp.p_d)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")


def _quadratic_set(a: float, b: float, c: float, tol: float) -> Tuple[Interval, ...]:
    """{τ : aτ² + bτ + c ≤ 0} as sorted disjoint closed intervals."""
    if abs(a) <= tol:
        if abs(b) <= tol:
            return ((-math.inf, math.inf),) if c <= 0 else ()
        root = -c / b
        return ((-math.inf, root),) if b > 0 else ((root, math.inf),)
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return () if a > 0 else ((-math.inf, math.inf),)
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    if q == 0.0:
        r1 = r2 = 0.0
    else:
        r1, r2 = sorted((q / a, c / q))
    if a > 0:
        return ((r1, r2),)
    return ((-math.inf, r1), (r2, math.inf))


def ar_set_fold(inp: ARFoldInput, alpha: float) -> ARSet:
    """
    Closed-form {τ : AR_j(τ) ≤ χ²_{1,1-α}} for a scalar treatment.

    s(τ) = Σ υ̂ᵢŨᵢ(τ) is affine and n̄Ω(τ) = Σ Ũᵢ(τ)²υ̃ᵢ² is quadratic in τ,
    so the set is the solution of s(τ)² - c·n̄Ω(τ) ≤ 0.
    """
    _check_alpha(alpha)
    if inp.p_d != 1:
        raise ConfigError("closed-form AR sets need a single treatment; use ar_set_grid with a tau grid")
    part = _Partialled(inp)
    crit = float(stats.chi2.ppf(1.0 - alpha, 1))
    ups, ups_t = part.ups[:, 0], part.ups_t[:, 0]
    y_t, d_t = part.y_t, part.d_t[:, 0]
    s0, s1 = float(ups @ y_t), float(ups @ d_t)
    w2 = ups_t ** 2
    q0, q1, q2 = float(w2 @ (y_t * y_t)), float(w2 @ (y_t * d_t)), float(w2 @ (d_t * d_t))

    a = s1 * s1 - crit * q2
    b = -2.0 * s0 * s1 + 2.0 * crit * q1
    c = s0 * s0 - crit * q0
    ref = s0 * s0 + s1 * s1 + crit * (q0 + q2)
    warnings: List[str] = []
    if part.degenerate or ref == 0.0 or max(abs(a), abs(b), abs(c)) <= COEF_TOL * ref:
        msg = f"fold {inp.fold}: AR quadratic is degenerate, set is the whole line"
        logger.warning(msg)
        warnings.append(msg)
        return ARSet(((-math.inf, math.inf),), alpha, warnings=tuple(warnings))
    return ARSet(_quadratic_set(a, b, c, COEF_TOL * ref), alpha)


def intersect_intervals(a: Iterable[Interval], b: Iterable[Interval]) -> Tuple[Interval, ...]:
    out = []
    for lo1, hi1 in a:
        for lo2, hi2 in b:
            lo, hi = max(lo1, lo2), min(hi1, hi2)
            if lo <= hi:
                out.append((lo, hi))
    return tuple(sorted(out))


def ar_set_combined(folds: Sequence[ARFoldInput], alpha: float, k: Optional[int] = None) -> ARSet:
    """
    Bonferroni combination: intersect the per-fold sets built at level α/K.

    The intersection may be empty even though every fold set contains its own
    fold estimate; that outcome is reported and flagged, not suppressed.
    """
    _check_alpha(alpha)
    if not folds:
        raise DataError("ar_set_combined needs at least one fold")
    k = len(folds) if k is None else int(k)
    fold_sets = tuple(ar_set_fold(inp, alpha / k) for inp in folds)
    intervals: Tuple[Interval, ...] = ((-math.inf, math.inf),)
    warnings: List[str] = []
    for fs in fold_sets:
        intervals = intersect_intervals(intervals, fs.intervals)
        warnings.extend(fs.warnings)
    if not intervals:
        msg = "the per-fold Anderson-Rubin sets do not intersect; combined set is empty"
        logger.warning(msg)
        warnings.append(msg)
    return ARSet(intervals, alpha, warnings=tuple(warnings), fold_sets=fold_sets)


def wald_ci(est: EstimateResult, index: int, alpha: float = 0.05) -> Interval:
    """θ̂ᵢ ± z_{1-α/2}·√V̂ᵢᵢ."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    centre = float(est.theta_hat[index])
    half = z * math.sqrt(max(float(est.vcov[index, index]), 0.0))
    return centre - half, centre + half
