"""
Plug-in IV estimation with a constructed instrument.

Holds the just-identified plug-in solve with its sandwich variance, the
Frisch-Waugh-Lovell subvector path, classical TSLS with transformed
instruments, the first-stage F diagnostic and the Hausman contrast.
"""

from __future__ import annotations

import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import attrs
import numpy as np
from scipy import stats

from mlss_iv.core.data_model import Dataset, DesignPair, design_matrices
from mlss_iv.core.errors import ConfigError, DegenerateDesignError, MLSSError
from mlss_iv.core.instruments import InstrumentMatrix, WeightingScheme
from mlss_iv.core.learners.linear import (
    DEFAULT_THRESHOLDS,
    cell_index,
    polynomial_features,
    resolve_thresholds,
)
from mlss_iv.core.linalg import least_squares, numerical_rank, psd_pinv, residualize, solve_square

logger = logging.getLogger(__name__)

TSLS_TRANSFORMS = ("linear", "quadratic", "quadratic_interact", "cubic_interact", "discretized")

#: F reported for a perfect first-stage fit.
F_CAP = 1e12
F_RULE_OF_THUMB = 10.0


@attrs.frozen
class FStat:
    """First-stage F for one treatment column."""

    value: float
    dof: Tuple[int, int]
    robust: bool = True
    flag: Optional[str] = None

    @property
    def weak(self) -> bool:
        return self.value < F_RULE_OF_THUMB


@attrs.frozen
class EstimateDiagnostics:
    first_stage_f: Tuple[FStat, ...] = ()
    pooled_oos_r2: Tuple[float, ...] = ()
    condition_number: float = float("nan")


@attrs.frozen(eq=False)
class EstimateResult:
    """θ̂ = (α̂, τ̂′, β̂′)′ in the column order of T, with its sandwich covariance."""

    theta_hat: np.ndarray
    vcov: np.ndarray
    g_hat: np.ndarray
    omega_hat: np.ndarray
    residuals: np.ndarray
    names: Tuple[str, ...]
    p_d: int
    n: int
    diagnostics: EstimateDiagnostics = EstimateDiagnostics()
    warnings: Tuple[str, ...] = ()
    label: str = "mlss"

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def tau_index(self) -> np.ndarray:
        return np.arange(1, 1 + self.p_d)

    @property
    def tau(self) -> np.ndarray:
        return self.theta_hat[self.tau_index]

    @property
    def tau_se(self) -> np.ndarray:
        return self.se[self.tau_index]


class HausmanResult(NamedTuple):
    stat: float
    dof: int
    pvalue: float
    inconclusive: bool = False


@attrs.frozen
class FoldEstimate:
    """θ̂ recomputed on one fold's rows; ``error`` is set when that solve failed."""

    fold: int
    n: int
    theta_hat: Optional[Tuple[float, ...]] = None
    se: Optional[Tuple[float, ...]] = None
    error: Optional[str] = None


class _PluginFit(NamedTuple):
    theta: np.ndarray
    vcov: np.ndarray
    g: np.ndarray
    omega: np.ndarray
    residuals: np.ndarray
    cond: float


def _plugin(upsilon: np.ndarray, t: np.ndarray, y: np.ndarray, hc1: bool) -> _PluginFit:
    n, k = t.shape
    if upsilon.shape != t.shape:
        raise ValueError(f"instrument has shape {upsilon.shape} but regressors have {t.shape}")
    if y.shape[0] != n:
        raise ValueError(f"outcome has {y.shape[0]} rows, regressors have {n}")
    g = upsilon.T @ t / n
    theta, cond = solve_square(g, upsilon.T @ y / n)
    resid = y - t @ theta
    omega = (upsilon * (resid ** 2)[:, None]).T @ upsilon / n
    g_inv, _ = solve_square(g, np.eye(k))
    vcov = g_inv @ omega @ g_inv.T / n
    if hc1:
        if n <= k:
            raise DegenerateDesignError(f"HC1 needs n > dim(theta), got n={n}, dim={k}")
        vcov = vcov * n / (n - k)
    return _PluginFit(theta, 0.5 * (vcov + vcov.T), g, omega, resid, cond)


def default_names(p_d: int, p_x: int) -> Tuple[str, ...]:
    return ("const",) + tuple(f"d_{i}" for i in range(p_d)) + tuple(f"x_{i}" for i in range(p_x))


def mlss_estimate(
    inst: InstrumentMatrix,
    pair: DesignPair,
    y: np.ndarray,
    *,
    hc1: bool = False,
    names: Optional[Sequence[str]] = None,
    label: str = "mlss",
) -> EstimateResult:
    """
    θ̂ = (Σ Υ̂ᵢTᵢ′)⁻¹ Σ Υ̂ᵢYᵢ with V̂ = Ĝ⁻¹Ω̂Ĝ⁻ᵀ / n.

    Raises:
        WeakIdentificationError: when Ĝ has condition number above 1e12
    """
    y = np.asarray(y, dtype=float).ravel()
    fitted = _plugin(np.asarray(inst.upsilon, dtype=float), pair.t, y, hc1)
    warnings = list(inst.warnings)

    f_stats: Tuple[FStat, ...] = ()
    if inst.weighting is WeightingScheme.IDENTITY:
        try:
            f_stats = first_stage_F(inst, pair)
        except DegenerateDesignError as exc:
            warnings.append(f"first-stage F unavailable: {exc}")
    for name, f in zip(names or default_names(pair.p_d, pair.p_x), f_stats):
        if f.weak:
            warnings.append(f"first-stage F for {name} is {f.value:.3g} (< 10); consider Anderson-Rubin inference")

    return EstimateResult(
        theta_hat=fitted.theta,
        vcov=fitted.vcov,
        g_hat=fitted.g,
        omega_hat=fitted.omega,
        residuals=fitted.residuals,
        names=tuple(names) if names is not None else default_names(pair.p_d, pair.p_x),
        p_d=pair.p_d,
        n=pair.n,
        diagnostics=EstimateDiagnostics(
            first_stage_f=f_stats,
            pooled_oos_r2=tuple(inst.pooled_oos_r2),
            condition_number=fitted.cond,
        ),
        warnings=tuple(warnings),
        label=label,
    )


def ols_estimate(
    regressors: np.ndarray,
    y: np.ndarray,
    *,
    hc1: bool = False,
    p_d: int = 1,
    names: Optional[Sequence[str]] = None,
    label: str = "ols",
) -> EstimateResult:
    """OLS with a HC0 (or HC1) sandwich: the plug-in solve with Υ̂ = regressors."""
    r = np.asarray(regressors, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    fitted = _plugin(r, r, y, hc1)
    return EstimateResult(
        theta_hat=fitted.theta,
        vcov=fitted.vcov,
        g_hat=fitted.g,
        omega_hat=fitted.omega,
        residuals=fitted.residuals,
        names=tuple(names) if names is not None else tuple(f"b_{i}" for i in range(r.shape[1])),
        p_d=p_d,
        n=r.shape[0],
        diagnostics=EstimateDiagnostics(condition_number=fitted.cond),
        label=label,
    )


# ----------------------------------------------------------------------
# FWL subvector path
# ----------------------------------------------------------------------

def fwl_residualize(m: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """``m`` minus its least-squares projection on the columns of ``xbar``."""
    resid, ridge_used = residualize(np.asarray(m, dtype=float), np.asarray(xbar, dtype=float))
    if ridge_used:
        logger.warning("covariate block [1, X] is rank deficient; residualized with a ridge fallback")
    return resid


def subvector_tau(inst: InstrumentMatrix, pair: DesignPair, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    τ̂ = (Σ υ̃ᵢD̃ᵢ′)⁻¹ Σ υ̃ᵢỸᵢ with everything residualized on [1, X].

    The sandwich uses Ũ = Ỹ - D̃τ̂, which equals the full-model residual, so
    both τ̂ and its covariance reproduce the τ block of :func:`mlss_estimate`.
    """
    if inst.weighting is not WeightingScheme.IDENTITY:
        raise ConfigError("the subvector path assumes identity weighting")
    y = np.asarray(y, dtype=float).ravel()
    xbar = pair.xbar
    ups = fwl_residualize(inst.excluded, xbar)
    d_t = fwl_residualize(pair.d, xbar)
    y_t = fwl_residualize(y, xbar)
    n = pair.n
    g = ups.T @ d_t / n
    tau, _ = solve_square(g, ups.T @ y_t / n)
    resid = y_t - d_t @ tau
    omega = (ups * (resid ** 2)[:, None]).T @ ups / n
    g_inv, _ = solve_square(g, np.eye(pair.p_d))
    vcov = g_inv @ omega @ g_inv.T / n
    return tau, 0.5 * (vcov + vcov.T)


# ----------------------------------------------------------------------
# TSLS baseline
# ----------------------------------------------------------------------

def _cell_dummies(w: np.ndarray, thresholds) -> np.ndarray:
    ids = cell_index(w, resolve_thresholds(thresholds, w.shape[1]))
    occupied = np.unique(ids)
    # the first occupied cell is absorbed by the constant
    return (ids[:, None] == occupied[None, 1:]).astype(float)


def transform_instruments(w: np.ndarray, transform: str, *, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """f(W): the excluded-instrument columns for one TSLS transform."""
    if transform == "linear":
        return np.asarray(w, dtype=float)
    if transform == "quadratic":
        return polynomial_features(w, 2, False)
    if transform == "quadratic_interact":
        return polynomial_features(w, 2, True)
    if transform == "cubic_interact":
        return polynomial_features(w, 3, True)
    if transform == "discretized":
        return _cell_dummies(w, thresholds)
    raise ConfigError(f"unknown TSLS transform {transform!r}; valid: {', '.join(TSLS_TRANSFORMS)}")


def tsls_instrument(ds: Dataset, transform: str = "linear", *, thresholds=DEFAULT_THRESHOLDS) -> InstrumentMatrix:
    """
    The projection T̂ = P_Z T with Z = [1, f(W), X], wrapped as a single-fold
    instrument. Its treatment block is the classical first-stage fit.

    Raises:
        DegenerateDesignError: when Z is rank deficient or has fewer excluded
            columns than treatments
    """
    pair = design_matrices(ds)
    f_w = transform_instruments(ds.w, transform, thresholds=thresholds)
    if f_w.shape[1] < ds.p_d:
        raise DegenerateDesignError(
            f"TSLS({transform}) has {f_w.shape[1]} excluded instruments for {ds.p_d} treatments"
        )
    z = np.column_stack([np.ones(ds.n), f_w, ds.x])
    rank = numerical_rank(z)
    if rank < z.shape[1]:
        raise DegenerateDesignError(f"TSLS({transform}) instrument matrix has rank {rank} of {z.shape[1]}")
    t_hat = z @ least_squares(z, pair.t).coef
    return InstrumentMatrix.from_array(t_hat, range(1, 1 + ds.p_d))


def tsls(ds: Dataset, transform: str = "linear", *, thresholds=DEFAULT_THRESHOLDS, hc1: bool = False) -> EstimateResult:
    """
    Two-stage least squares of Y on T = [1, D, X] with instruments [1, f(W), X].

    The overidentified case goes through the projection form: T̂ is used as the
    just-identified instrument, which gives the usual HC0 2SLS sandwich.
    """
    inst = tsls_instrument(ds, transform, thresholds=thresholds)
    pair = design_matrices(ds)
    names = ("const",) + ds.d_names + ds.x_names
    return mlss_estimate(inst, pair, ds.y, hc1=hc1, names=names, label=f"tsls_{transform}")


# ----------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------

def first_stage_F(inst: InstrumentMatrix, pair: DesignPair) -> Tuple[FStat, ...]:
    """
    Robust first-stage F per treatment: regress dₖ on [1, υ̂ₖ, X] and square
    the HC1 t-statistic of υ̂ₖ. A perfect fit is capped at ``F_CAP`` and flagged.

    Raises:
        DegenerateDesignError: when [1, υ̂ₖ, X] is rank deficient
    """
    out: List[FStat] = []
    excluded = inst.excluded
    n = pair.n
    for k in range(pair.p_d):
        r = np.column_stack([np.ones(n), excluded[:, k], pair.x])
        q = r.shape[1]
        if n <= q:
            raise DegenerateDesignError(f"first-stage regression has {n} rows for {q} regressors")
        rank = numerical_rank(r)
        if rank < q:
            raise DegenerateDesignError(
                f"first-stage regressors for treatment {k} are collinear (rank {rank} of {q})"
            )
        d_k = pair.d[:, k]
        fit = ols_estimate(r, d_k, hc1=True)
        ssr = float(np.sum(fit.residuals ** 2))
        scale = max(1.0, float(np.sum(d_k ** 2)))
        se = fit.se[1]
        if ssr <= 1e-20 * scale or se == 0.0:
            out.append(FStat(F_CAP, (1, n - q), True, "perfect_fit"))
            continue
        out.append(FStat(min(float((fit.theta_hat[1] / se) ** 2), F_CAP), (1, n - q), True))
    return tuple(out)


def hausman_test(a: EstimateResult, b: EstimateResult, block: Sequence[int]) -> HausmanResult:
    """
    Hausman contrast of ``a`` against the presumed efficient ``b`` on ``block``.

    stat = d′(V̂ₐ - V̂_b)⁺d with a pseudoinverse dropping eigenvalues below
    1e-10·‖V̂ₐ‖₂; dof is the number of eigenvalues kept.
    """
    idx = np.asarray(list(block), dtype=int)
    if a.theta_hat.shape != b.theta_hat.shape:
        raise ValueError(f"non-conformable estimates: {a.theta_hat.shape} vs {b.theta_hat.shape}")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.theta_hat.size:
        raise ValueError(f"block {list(block)} is out of range for {a.theta_hat.size} coefficients")
    d = a.theta_hat[idx] - b.theta_hat[idx]
    va = a.vcov[np.ix_(idx, idx)]
    diff = va - b.vcov[np.ix_(idx, idx)]
    cutoff = 1e-10 * float(np.linalg.norm(va, 2))
    inv, dof = psd_pinv(diff, cutoff)
    if np.all(d == 0.0):
        return HausmanResult(0.0, dof, 1.0, False)
    if dof == 0:
        logger.warning("Hausman variance gap is numerically zero; test is inconclusive")
        return HausmanResult(float("nan"), 0, float("nan"), True)
    stat = max(float(d @ inv @ d), 0.0)
    return HausmanResult(stat, dof, float(stats.chi2.sf(stat, dof)), False)


def forbidden_regression(inst: InstrumentMatrix, pair: DesignPair, y: np.ndarray) -> EstimateResult:
    """OLS of Y on [1, υ̂, X]: the inconsistent plug-in regression, kept as a contrast."""
    r = np.column_stack([np.ones(pair.n), inst.excluded, pair.x])
    return ols_estimate(r, y, p_d=pair.p_d, names=default_names(pair.p_d, pair.p_x), label="forbidden")


def per_fold_estimates(inst: InstrumentMatrix, pair: DesignPair, y: np.ndarray) -> Tuple[FoldEstimate, ...]:
    """θ̂ and its standard errors recomputed on each fold separately."""
    y = np.asarray(y, dtype=float).ravel()
    out = []
    for j in range(inst.k):
        rows = inst.fold_rows(j)
        try:
            fitted = _plugin(inst.upsilon[rows], pair.t[rows], y[rows], False)
        except (MLSSError, ValueError) as exc:
            out.append(FoldEstimate(fold=j, n=rows.size, error=str(exc)))
            continue
        se = np.sqrt(np.clip(np.diag(fitted.vcov), 0.0, None))
        out.append(FoldEstimate(fold=j, n=rows.size, theta_hat=tuple(map(float, fitted.theta)),
                                se=tuple(map(float, se))))
    return tuple(out)
