"""
Cross-fitted construction of the estimated technical instrument Υ̂.

Each row i of Υ̂ is produced by nuisance models trained on the folds other
than the one holding i. Identity and efficient weighting are supported,
with and without exogenous covariates.
"""

from __future__ import annotations

import enum
import logging
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import attrs
import numpy as np
from joblib import Parallel, delayed

from mlss_iv.core.data_model import Dataset, FoldAssignment, design_matrices, make_folds
from mlss_iv.core.errors import DataError
from mlss_iv.core.learners import LearnerSpec, Predictor, fit, oos_r2, predict
from mlss_iv.core.linalg import least_squares, plugin_solve, solve_ridge_fallback
from mlss_iv.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

#: Relative floor on σ̂²: ε = SIGMA2_FLOOR × Var(Û) on the training folds.
SIGMA2_FLOOR = 1e-6
MIN_PRELIM_ROWS = 4


class WeightingScheme(str, enum.Enum):
    IDENTITY = "identity"
    EFFICIENT = "efficient"


class CovariateMode(str, enum.Enum):
    PARTIAL_LINEAR = "partial_linear"
    CONDITIONAL_MEAN_ONLY = "conditional_mean_only"
    PARTIAL_OUT = "partial_out"


@attrs.frozen
class FoldDiagnostics:
    """Per-fold first-stage quality: out-of-sample R² per treatment column and learner warnings."""

    fold: int
    n_train: int
    n_eval: int
    oos_r2: Tuple[float, ...]
    warnings: Tuple[str, ...] = ()


@attrs.frozen(eq=False)
class InstrumentMatrix:
    """Estimated technical instrument rows Υ̂(Zᵢ) plus their fold provenance."""

    upsilon: np.ndarray
    excluded_block: Tuple[int, ...]
    fold_of: np.ndarray
    weighting: WeightingScheme = WeightingScheme.IDENTITY
    covariate_mode: CovariateMode = CovariateMode.PARTIAL_LINEAR
    treatment_prediction: Optional[np.ndarray] = None
    fold_diagnostics: Tuple[FoldDiagnostics, ...] = ()
    pooled_oos_r2: Tuple[float, ...] = ()
    warnings: Tuple[str, ...] = ()
    degenerate: bool = False
    full_sample: bool = False

    @property
    def n(self) -> int:
        return int(self.upsilon.shape[0])

    @property
    def k(self) -> int:
        return int(self.fold_of.max()) + 1 if self.fold_of.size else 0

    @property
    def excluded(self) -> np.ndarray:
        """υ̂(Zᵢ): the columns standing in for the treatments."""
        return self.upsilon[:, list(self.excluded_block)]

    def fold_rows(self, j: int) -> np.ndarray:
        return np.nonzero(self.fold_of == j)[0]

    @classmethod
    def from_array(
        cls,
        upsilon: np.ndarray,
        excluded_block: Sequence[int],
        *,
        weighting: WeightingScheme = WeightingScheme.IDENTITY,
    ) -> "InstrumentMatrix":
        """Wrap a precomputed instrument matrix (single pseudo-fold, no diagnostics)."""
        upsilon = np.asarray(upsilon, dtype=float)
        return cls(
            upsilon=upsilon,
            excluded_block=tuple(int(c) for c in excluded_block),
            fold_of=np.zeros(upsilon.shape[0], dtype=int),
            weighting=weighting,
            full_sample=True,
        )


class RobinsonFit(NamedTuple):
    """Partially linear fit on one training fold."""
    prediction: np.ndarray       # Ê_PL[D | X, W] on the evaluation rows
    ell: np.ndarray              # ℓ̂, shape (p_x, p_d)
    d_residual: np.ndarray       # D - ĝ_D(W) on the training rows
    x_residual: np.ndarray       # X - ĝ_X(W) on the training rows
    warnings: Tuple[str, ...]


@attrs.frozen(eq=False)
class NuisanceFold:
    """Variance nuisances fitted on one training fold S_{-j}."""

    fold: int
    prelim_theta: np.ndarray
    floor: float
    sigma2_model: Predictor
    xu2_model: Optional[Predictor]

    def sigma2_at(self, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Floored σ̂²(w) and the mask of rows that hit the floor."""
        raw = predict(self.sigma2_model, w)[:, 0]
        floored = raw < self.floor
        return np.where(floored, self.floor, raw), floored

    def xu2_at(self, w: np.ndarray) -> np.ndarray:
        return predict(self.xu2_model, w)


@attrs.frozen(eq=False)
class EfficientNuisances:
    """σ̂²(Wᵢ), Ê[XᵢUᵢ²|Wᵢ] and the preliminary θ̂ per fold, all cross-fitted."""

    sigma2_hat: np.ndarray
    xu2_hat: Optional[np.ndarray]
    prelim_theta: np.ndarray
    floored: np.ndarray
    folds: Tuple[NuisanceFold, ...]
    warnings: Tuple[str, ...] = ()


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def _fold_map(func: Callable[[int], object], k: int, n_jobs: int) -> List:
    # results come back in fold order whatever the completion order
    if n_jobs == 1 or k == 1:
        return [func(j) for j in range(k)]
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(func)(j) for j in range(k))


def _check_fold_sizes(folds: FoldAssignment) -> None:
    for j in range(folds.k):
        n_eval, n_train = folds.eval_index(j).size, folds.train_index(j).size
        if n_eval < 2 or n_train < 2:
            raise DataError(f"fold {j} has {n_eval} evaluation and {n_train} training rows; each needs at least 2")


def _fold_spec(spec: LearnerSpec, folds: FoldAssignment, j: int, nuisance: str) -> LearnerSpec:
    return spec.for_nuisance(nuisance).with_seed(derive_seed(spec.seed, folds.seed, j, nuisance))


def _fit_eval(spec: LearnerSpec, w_train, target, w_eval) -> Tuple[np.ndarray, Predictor]:
    model = fit(spec, w_train, target)
    return predict(model, w_eval), model


def robinson_fold(ds: Dataset, train: np.ndarray, evaluate: np.ndarray, spec_d: LearnerSpec,
                  spec_x: LearnerSpec) -> RobinsonFit:
    """
    Robinson's reduction on one split: fit ĝ_D = Ê[D|W] and ĝ_X = Ê[X|W] on
    ``train``, regress D - ĝ_D on X - ĝ_X without intercept, and return
    ĝ_D(W) + (X - ĝ_X(W))′ℓ̂ on ``evaluate``.
    """
    w_tr, w_ev = ds.w[train], ds.w[evaluate]
    gd_model = fit(spec_d, w_tr, ds.d[train])
    gx_model = fit(spec_x, w_tr, ds.x[train])
    d_res = ds.d[train] - predict(gd_model, w_tr)
    x_res = ds.x[train] - predict(gx_model, w_tr)
    ls = least_squares(x_res, d_res)
    warnings = list(gd_model.warnings) + list(gx_model.warnings)
    if ls.ridge_used:
        msg = "partial-linear: residualized covariate Gram matrix is singular, ridge fallback used"
        logger.warning(msg)
        warnings.append(msg)
    ell = ls.coef.reshape(ds.p_x, ds.p_d)
    prediction = predict(gd_model, w_ev) + (ds.x[evaluate] - predict(gx_model, w_ev)) @ ell
    return RobinsonFit(prediction, ell, d_res, x_res, tuple(warnings))


def partial_linear_predict(
    ds: Dataset,
    folds: FoldAssignment,
    spec: LearnerSpec,
    *,
    n_jobs: int = 1,
) -> np.ndarray:
    """Cross-fitted best partially linear prediction Ê_PL[Dᵢ | Xᵢ, Wᵢ], shape (n, p_d)."""
    if ds.p_x < 1:
        raise DataError("partial_linear_predict requires at least one covariate column")
    _check_fold_sizes(folds)

    def one_fold(j: int) -> RobinsonFit:
        return robinson_fold(
            ds, folds.train_index(j), folds.eval_index(j),
            _fold_spec(spec, folds, j, "d"), _fold_spec(spec, folds, j, "x"),
        )

    out = np.empty((ds.n, ds.p_d))
    for j, result in enumerate(_fold_map(one_fold, folds.k, n_jobs)):
        out[folds.eval_index(j)] = result.prediction
    return out


# ----------------------------------------------------------------------
# identity weighting
# ----------------------------------------------------------------------

class _FoldFirstStage(NamedTuple):
    excluded: np.ndarray            # instrument columns for the treatments on S_j
    treatment_prediction: np.ndarray
    warnings: Tuple[str, ...]


def _identity_fold(ds: Dataset, folds: FoldAssignment, spec: LearnerSpec,
                   mode: CovariateMode, j: int) -> _FoldFirstStage:
    tr, ev = folds.train_index(j), folds.eval_index(j)
    if ds.p_x == 0 or mode is CovariateMode.CONDITIONAL_MEAN_ONLY:
        pred, model = _fit_eval(_fold_spec(spec, folds, j, "d"), ds.w[tr], ds.d[tr], ds.w[ev])
        return _FoldFirstStage(pred, pred, model.warnings)
    if mode is CovariateMode.PARTIAL_LINEAR:
        rob = robinson_fold(ds, tr, ev, _fold_spec(spec, folds, j, "d"), _fold_spec(spec, folds, j, "x"))
        return _FoldFirstStage(rob.prediction, rob.prediction, rob.warnings)
    # partial_out: D̃ = D - E_L[D | X̄] on the training fold, then ĥ(W) = Ê[D̃ | W]
    xbar_tr, xbar_ev = ds.xbar[tr], ds.xbar[ev]
    ls = least_squares(xbar_tr, ds.d[tr])
    coef = ls.coef.reshape(xbar_tr.shape[1], ds.p_d)
    d_tilde = ds.d[tr] - xbar_tr @ coef
    h_ev, model = _fit_eval(_fold_spec(spec, folds, j, "dres"), ds.w[tr], d_tilde, ds.w[ev])
    warnings = list(model.warnings)
    if ls.ridge_used:
        warnings.append("partial-out: covariate design is rank deficient, ridge fallback used")
    return _FoldFirstStage(h_ev, xbar_ev @ coef + h_ev, tuple(warnings))


def _diagnostics(ds: Dataset, folds: FoldAssignment, j: int, pred_ev: np.ndarray,
                 warnings: Sequence[str]) -> FoldDiagnostics:
    tr, ev = folds.train_index(j), folds.eval_index(j)
    r2 = tuple(
        oos_r2(pred_ev[:, k], ds.d[ev, k], float(np.mean(ds.d[tr, k]))) for k in range(ds.p_d)
    )
    return FoldDiagnostics(fold=j, n_train=tr.size, n_eval=ev.size, oos_r2=r2, warnings=tuple(warnings))


def _pooled_r2(ds: Dataset, folds: FoldAssignment, treatment_prediction: np.ndarray) -> Tuple[float, ...]:
    baseline = np.empty_like(treatment_prediction)
    for j in range(folds.k):
        baseline[folds.eval_index(j)] = ds.d[folds.train_index(j)].mean(axis=0)
    out = []
    for k in range(ds.p_d):
        num = float(np.sum((ds.d[:, k] - treatment_prediction[:, k]) ** 2))
        den = float(np.sum((ds.d[:, k] - baseline[:, k]) ** 2))
        out.append(0.0 if den == 0.0 and num == 0.0 else (float("-inf") if den == 0.0 else 1.0 - num / den))
    return tuple(out)


def _degenerate_columns(treatment_prediction: np.ndarray) -> List[int]:
    bad = []
    for k in range(treatment_prediction.shape[1]):
        col = treatment_prediction[:, k]
        if np.ptp(col) <= 1e-12 * max(1.0, float(np.max(np.abs(col)))):
            bad.append(k)
    return bad


def _assemble(
    ds: Dataset,
    folds: FoldAssignment,
    upsilon: np.ndarray,
    treatment_prediction: np.ndarray,
    diagnostics: List[FoldDiagnostics],
    weighting: WeightingScheme,
    mode: CovariateMode,
    extra_warnings: Sequence[str] = (),
) -> InstrumentMatrix:
    warnings = list(extra_warnings)
    for diag in diagnostics:
        warnings.extend(f"fold {diag.fold}: {w}" for w in diag.warnings)
    bad = _degenerate_columns(treatment_prediction)
    for k in bad:
        msg = f"treatment prediction for {ds.d_names[k]} is constant; G-hat will be singular"
        logger.warning(msg)
        warnings.append(msg)
    upsilon.setflags(write=False)
    return InstrumentMatrix(
        upsilon=upsilon,
        excluded_block=tuple(range(1, 1 + ds.p_d)),
        fold_of=folds.fold_of,
        weighting=weighting,
        covariate_mode=mode,
        treatment_prediction=treatment_prediction,
        fold_diagnostics=tuple(diagnostics),
        pooled_oos_r2=_pooled_r2(ds, folds, treatment_prediction),
        warnings=tuple(warnings),
        degenerate=bool(bad),
        full_sample=folds.full_sample,
    )


def generate_instrument(
    ds: Dataset,
    folds: FoldAssignment,
    spec: LearnerSpec,
    weighting: WeightingScheme | str = WeightingScheme.IDENTITY,
    *,
    covariate_mode: CovariateMode | str = CovariateMode.PARTIAL_LINEAR,
    n_jobs: int = 1,
) -> InstrumentMatrix:
    """
    Build Υ̂ by cross-fitting.

    Identity weighting gives rows [1, υ̂(Zᵢ)′, Xᵢ′]′ with υ̂ the fold-wise
    prediction of D (conditional mean, partially linear prediction or the
    partial-out variant, depending on ``covariate_mode``). Efficient weighting
    divides by σ̂²(Wᵢ) and, with covariates, adds the orthogonalized covariate
    term; see :func:`hetero_optimal_instrument`.

    Args:
        ds: The data
        folds: Fold assignment; ``FoldAssignment.full(n)`` disables splitting
        spec: First-stage learner used for every nuisance
        weighting: ``identity`` or ``efficient``
        covariate_mode: Covariate path for identity weighting; with efficient
            weighting and covariates it is ignored and a warning is recorded
        n_jobs: Worker count for the per-fold fits

    Returns:
        InstrumentMatrix with per-fold out-of-sample R² diagnostics
    """
    weighting = WeightingScheme(weighting)
    mode = CovariateMode(covariate_mode)
    _check_fold_sizes(folds)

    if weighting is WeightingScheme.EFFICIENT:
        nuis = efficient_nuisances(ds, folds, spec, n_jobs=n_jobs)
        if ds.p_x > 0:
            inst = hetero_optimal_instrument(ds, folds, spec, nuis, n_jobs=n_jobs)
            if mode is not CovariateMode.PARTIAL_LINEAR:
                msg = (f"covariate_mode={mode.value} is ignored under efficient weighting with covariates; "
                       "the orthogonalized covariate term is used")
                logger.warning(msg)
                inst = attrs.evolve(inst, warnings=(msg,) + inst.warnings)
            return inst

    stages = _fold_map(lambda j: _identity_fold(ds, folds, spec, mode, j), folds.k, n_jobs)
    excluded = np.empty((ds.n, ds.p_d))
    treatment_prediction = np.empty((ds.n, ds.p_d))
    diagnostics = []
    for j, stage in enumerate(stages):
        ev = folds.eval_index(j)
        excluded[ev] = stage.excluded
        treatment_prediction[ev] = stage.treatment_prediction
        diagnostics.append(_diagnostics(ds, folds, j, stage.treatment_prediction, stage.warnings))

    upsilon = np.column_stack([np.ones(ds.n), excluded, ds.x])
    extra: Tuple[str, ...] = ()
    if weighting is WeightingScheme.EFFICIENT:
        # no covariates here: Υ̂ = [1, μ̂(W)′]′ / σ̂²(W)
        upsilon = upsilon / nuis.sigma2_hat[:, None]
        extra = nuis.warnings
    return _assemble(ds, folds, upsilon, treatment_prediction, diagnostics, weighting, mode, extra)


# ----------------------------------------------------------------------
# efficient weighting
# ----------------------------------------------------------------------

def _nuisance_fold(ds: Dataset, folds: FoldAssignment, spec: LearnerSpec, j: int) -> NuisanceFold:
    tr = folds.train_index(j)
    if tr.size < MIN_PRELIM_ROWS:
        raise DataError(
            f"fold {j}: {tr.size} training rows, at least {MIN_PRELIM_ROWS} are needed for the preliminary estimate"
        )
    sub = ds.subset(tr)
    inner = make_folds(sub.n, 2, derive_seed(folds.seed, j, "prelim"))
    inner_inst = generate_instrument(sub, inner, spec, WeightingScheme.IDENTITY,
                                     covariate_mode=CovariateMode.PARTIAL_LINEAR)
    t_tr = design_matrices(sub).t
    theta = plugin_solve(inner_inst.upsilon, t_tr, sub.y)
    u = sub.y - t_tr @ theta
    u2 = u ** 2
    floor = max(SIGMA2_FLOOR * float(np.var(u)), 1e-12)
    sigma2_model = fit(_fold_spec(spec, folds, j, "u2"), sub.w, u2)
    xu2_model = None
    if ds.p_x:
        xu2_model = fit(_fold_spec(spec, folds, j, "xu2"), sub.w, sub.x * u2[:, None])
    return NuisanceFold(fold=j, prelim_theta=theta, floor=floor,
                        sigma2_model=sigma2_model, xu2_model=xu2_model)


def efficient_nuisances(
    ds: Dataset,
    folds: FoldAssignment,
    spec: LearnerSpec,
    *,
    n_jobs: int = 1,
) -> EfficientNuisances:
    """
    Cross-fitted variance nuisances for efficient weighting.

    On each S_{-j} an identity-weighted estimate (itself split 2-fold inside
    S_{-j}) gives Ûᵢ; Ê[Û² | W] and, with covariates, Ê[XÛ² | W] are fitted
    there and evaluated on S_j. σ̂² is floored at 1e-6 × Var(Û).
    """
    _check_fold_sizes(folds)
    fold_models = _fold_map(lambda j: _nuisance_fold(ds, folds, spec, j), folds.k, n_jobs)
    sigma2 = np.empty(ds.n)
    floored = np.zeros(ds.n, dtype=bool)
    xu2 = np.empty((ds.n, ds.p_x)) if ds.p_x else None
    warnings: List[str] = []
    for j, nf in enumerate(fold_models):
        ev = folds.eval_index(j)
        sigma2[ev], floored[ev] = nf.sigma2_at(ds.w[ev])
        if xu2 is not None:
            xu2[ev] = nf.xu2_at(ds.w[ev])
        warnings.extend(f"fold {j}: {w}" for w in nf.sigma2_model.warnings)
    if floored.any():
        msg = f"sigma2 predictions floored on {int(floored.sum())} rows"
        logger.warning(msg)
        warnings.append(msg)
    return EfficientNuisances(
        sigma2_hat=sigma2,
        xu2_hat=xu2,
        prelim_theta=np.vstack([nf.prelim_theta for nf in fold_models]),
        floored=floored,
        folds=tuple(fold_models),
        warnings=tuple(warnings),
    )


def _hetero_fold(ds: Dataset, folds: FoldAssignment, spec: LearnerSpec, nf: NuisanceFold,
                 j: int) -> Tuple[np.ndarray, np.ndarray, Tuple[str, ...]]:
    tr, ev = folds.train_index(j), folds.eval_index(j)
    t = design_matrices(ds).t
    gd = fit(_fold_spec(spec, folds, j, "d"), ds.w[tr], ds.d[tr])
    gx = fit(_fold_spec(spec, folds, j, "x"), ds.w[tr], ds.x[tr])

    s2_tr, _ = nf.sigma2_at(ds.w[tr])
    s2_ev, _ = nf.sigma2_at(ds.w[ev])
    x_tilde_tr = ds.x[tr] - nf.xu2_at(ds.w[tr]) / s2_tr[:, None]
    x_tilde_ev = ds.x[ev] - nf.xu2_at(ds.w[ev]) / s2_ev[:, None]

    # unconditional moments E[T X̃′] and E[U² X̃ X̃′] on the training fold only
    u2_tr = (ds.y[tr] - t[tr] @ nf.prelim_theta) ** 2
    m = tr.size
    a = t[tr].T @ x_tilde_tr / m
    b = (x_tilde_tr * u2_tr[:, None]).T @ x_tilde_tr / m
    b_inv_at, ridge = solve_ridge_fallback(b, a.T)
    warnings = list(gd.warnings) + list(gx.warnings)
    if ridge:
        msg = "efficient instrument: E[U^2 X~ X~'] is singular, ridge fallback used"
        logger.warning(msg)
        warnings.append(msg)

    mu_ev = predict(gd, ds.w[ev])
    cond_mean = np.column_stack([np.ones(ev.size), mu_ev, predict(gx, ds.w[ev])])
    rows = cond_mean / s2_ev[:, None] + x_tilde_ev @ b_inv_at
    return rows, mu_ev, tuple(warnings)


def hetero_optimal_instrument(
    ds: Dataset,
    folds: FoldAssignment,
    spec: LearnerSpec,
    nuis: EfficientNuisances,
    *,
    n_jobs: int = 1,
) -> InstrumentMatrix:
    """
    Efficient instrument with covariates:
    Υ̂(Z) = Ê[T|W]/σ̂²(W) + Ê[T X̃′] Ê[U² X̃ X̃′]⁻¹ X̃ with X̃ = X - Ê[XU²|W]/σ̂²(W).

    Ê[T|W] is taken componentwise, with E[1|W] = 1 and E[X|W] fitted by the learner.
    """
    if ds.p_x < 1:
        raise DataError("hetero_optimal_instrument requires at least one covariate column")
    _check_fold_sizes(folds)
    results = _fold_map(lambda j: _hetero_fold(ds, folds, spec, nuis.folds[j], j), folds.k, n_jobs)
    upsilon = np.empty((ds.n, 1 + ds.p_d + ds.p_x))
    treatment_prediction = np.empty((ds.n, ds.p_d))
    diagnostics = []
    for j, (rows, mu_ev, warnings) in enumerate(results):
        ev = folds.eval_index(j)
        upsilon[ev] = rows
        treatment_prediction[ev] = mu_ev
        diagnostics.append(_diagnostics(ds, folds, j, mu_ev, warnings))
    return _assemble(ds, folds, upsilon, treatment_prediction, diagnostics,
                     WeightingScheme.EFFICIENT, CovariateMode.PARTIAL_LINEAR, nuis.warnings)
