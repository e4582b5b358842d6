"""
Report formatter for estimation, Anderson-Rubin and simulation results.
Converts result objects into plain, strict-JSON dictionaries and flat CSV tables.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import cattrs
import numpy as np
import pandas as pd
from typing_extensions import TypedDict

from mlss_iv.core.estimator import EstimateResult, FoldEstimate, FStat, HausmanResult
from mlss_iv.core.instruments import InstrumentMatrix
from mlss_iv.core.weak_iv import ARSet, wald_ci


class CoefficientEntry(TypedDict):
    name: str
    estimate: float
    se: float
    wald_lo: float
    wald_hi: float


class FirstStageEntry(TypedDict):
    treatment: str
    F: float
    dof: List[int]
    robust: bool
    flag: Optional[str]
    weak: bool


class ARSetEntry(TypedDict):
    intervals: List[List[Any]]
    shape: str
    empty: bool
    alpha: float


class EstimateReport(TypedDict, total=False):
    command: str
    status: str
    config: Dict[str, Any]
    n: int
    coefficients: List[CoefficientEntry]
    vcov: List[List[float]]
    first_stage: List[FirstStageEntry]
    pooled_oos_r2: List[float]
    fold_oos_r2: List[Dict[str, Any]]
    condition_number: float
    per_fold_estimates: List[Dict[str, Any]]
    hausman: Dict[str, Any]
    forbidden_regression: Dict[str, Any]
    warnings: List[str]
    error: str
    guidance: str


class ARReport(TypedDict, total=False):
    command: str
    status: str
    config: Dict[str, Any]
    alpha: float
    fold_alpha: float
    folds: List[Dict[str, Any]]
    combined: ARSetEntry
    finite: bool
    tau_hat: Optional[float]
    per_fold_estimates: List[Dict[str, Any]]
    grid: Dict[str, Any]
    warnings: List[str]
    error: str


_converter = cattrs.Converter()
_converter.register_unstructure_hook(np.ndarray, lambda a: a.tolist())
_converter.register_unstructure_hook(np.floating, float)
_converter.register_unstructure_hook(np.integer, int)
_converter.register_unstructure_hook(np.bool_, bool)


def strict_json_value(value: Any) -> Any:
    """Replace non-finite floats: inf -> "inf", -inf -> "-inf", NaN -> None."""
    if isinstance(value, dict):
        return {str(k): strict_json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [strict_json_value(v) for v in value]
    if isinstance(value, (np.generic, np.ndarray)):
        return strict_json_value(_converter.unstructure(value))
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
    return value


def unstructure(obj: Any) -> Any:
    return strict_json_value(_converter.unstructure(obj))


def dumps(report: Dict[str, Any]) -> str:
    """Byte-stable JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(strict_json_value(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(report: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(report))
    return path


def write_table(rows: Sequence[Dict[str, Any]], path: Union[str, Path], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns) if columns else None)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


class ReportFormatter:
    """Format estimation results for the JSON and CSV reports"""

    def __init__(self, alpha: float = 0.05):
        self.alpha = alpha

    def format_coefficients(self, est: EstimateResult) -> List[CoefficientEntry]:
        entries = []
        for i, name in enumerate(est.names):
            lo, hi = wald_ci(est, i, self.alpha)
            entries.append(CoefficientEntry(
                name=name,
                estimate=float(est.theta_hat[i]),
                se=float(est.se[i]),
                wald_lo=lo,
                wald_hi=hi,
            ))
        return entries

    def format_first_stage(self, f_stats: Sequence[FStat], treatments: Sequence[str]) -> List[FirstStageEntry]:
        return [
            FirstStageEntry(treatment=name, F=f.value, dof=list(f.dof), robust=f.robust, flag=f.flag, weak=f.weak)
            for name, f in zip(treatments, f_stats)
        ]

    def format_fold_estimates(self, folds: Sequence[FoldEstimate], names: Sequence[str]) -> List[Dict[str, Any]]:
        out = []
        for fe in folds:
            entry: Dict[str, Any] = {"fold": fe.fold, "n": fe.n}
            if fe.error is not None:
                entry["error"] = fe.error
            else:
                entry["estimates"] = dict(zip(names, fe.theta_hat))
                entry["se"] = dict(zip(names, fe.se))
            out.append(entry)
        return out

    def format_hausman(self, result: HausmanResult, against: str) -> Dict[str, Any]:
        return {
            "against": against,
            "stat": result.stat,
            "dof": result.dof,
            "pvalue": result.pvalue,
            "inconclusive": result.inconclusive,
        }

    def format_forbidden(self, est: EstimateResult, forbidden: EstimateResult) -> Dict[str, Any]:
        """τ̂ from OLS of Y on [1, υ̂, X] next to the plug-in τ̂, with the gap in combined standard errors."""
        treatments = est.names[1:1 + est.p_d]
        gap = forbidden.tau - est.tau
        scale = np.sqrt(forbidden.tau_se ** 2 + est.tau_se ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            in_se = np.where(scale > 0, gap / scale, np.nan)
        return {
            "tau": dict(zip(treatments, map(float, forbidden.tau))),
            "se": dict(zip(treatments, map(float, forbidden.tau_se))),
            "gap": dict(zip(treatments, map(float, gap))),
            "gap_in_se": dict(zip(treatments, map(float, in_se))),
        }

    def format_estimate(
        self,
        est: EstimateResult,
        inst: Optional[InstrumentMatrix] = None,
        *,
        config: Optional[Dict[str, Any]] = None,
        fold_estimates: Sequence[FoldEstimate] = (),
        hausman: Optional[Dict[str, Any]] = None,
        forbidden: Optional[EstimateResult] = None,
    ) -> EstimateReport:
        treatments = est.names[1:1 + est.p_d]
        report = EstimateReport(
            command="estimate",
            status="ok",
            config=dict(config or {}),
            n=est.n,
            coefficients=self.format_coefficients(est),
            vcov=est.vcov.tolist(),
            first_stage=self.format_first_stage(est.diagnostics.first_stage_f, treatments),
            pooled_oos_r2=list(est.diagnostics.pooled_oos_r2),
            condition_number=est.diagnostics.condition_number,
            warnings=list(est.warnings),
        )
        if inst is not None:
            report["fold_oos_r2"] = [
                {"fold": d.fold, "n_train": d.n_train, "n_eval": d.n_eval, "oos_r2": list(d.oos_r2)}
                for d in inst.fold_diagnostics
            ]
        if fold_estimates:
            report["per_fold_estimates"] = self.format_fold_estimates(fold_estimates, est.names)
        if hausman is not None:
            report["hausman"] = hausman
        if forbidden is not None:
            report["forbidden_regression"] = self.format_forbidden(est, forbidden)
        return report

    def format_ar_set(self, ar: ARSet) -> ARSetEntry:
        return ARSetEntry(
            intervals=[[lo, hi] for lo, hi in ar.intervals],
            shape=ar.shape,
            empty=ar.empty,
            alpha=ar.alpha,
        )

    def format_ar(
        self,
        combined: Optional[ARSet],
        *,
        k: int,
        config: Optional[Dict[str, Any]] = None,
        tau_hat: Optional[float] = None,
        fold_estimates: Sequence[FoldEstimate] = (),
        names: Sequence[str] = (),
        grid: Optional[Dict[str, Any]] = None,
        warnings: Sequence[str] = (),
    ) -> ARReport:
        report = ARReport(
            command="ar",
            status="ok",
            config=dict(config or {}),
            alpha=self.alpha,
            fold_alpha=self.alpha / k,
            tau_hat=tau_hat,
            warnings=list(warnings),
        )
        if combined is not None:
            report["folds"] = [
                dict(fold=j, **self.format_ar_set(fs)) for j, fs in enumerate(combined.fold_sets)
            ]
            report["combined"] = self.format_ar_set(combined)
            report["finite"] = combined.finite
            report["warnings"] = list(warnings) + list(combined.warnings)
        if fold_estimates:
            report["per_fold_estimates"] = self.format_fold_estimates(fold_estimates, names)
        if grid is not None:
            report["grid"] = grid
        return report

    def coefficient_rows(self, est: EstimateResult) -> List[Dict[str, Any]]:
        """Flat rows for ``--format csv``."""
        return [dict(entry) for entry in self.format_coefficients(est)]

