from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .base import EXIT_INPUT_ERROR, EXIT_OK, EXIT_WEAK_IDENTIFICATION, Command
from .utils import emit_report, parse_tau_grid, print_problems, str2bool, threads_from_env
from mlss_iv.cli.run_config import RUN_KEYS, RunConfig, load_toml_config
from mlss_iv.core.data_model import Dataset, DesignPair, design_matrices, load_csv, make_folds
from mlss_iv.core.errors import ConfigError, DataError, LearnerError, MLSSError, WeakIdentificationError
from mlss_iv.core.estimator import (
    EstimateResult,
    forbidden_regression,
    hausman_test,
    mlss_estimate,
    per_fold_estimates,
    tsls,
)
from mlss_iv.core.instruments import InstrumentMatrix, WeightingScheme, generate_instrument
from mlss_iv.core.report_formatter import ReportFormatter
from mlss_iv.core.weak_iv import ar_fold_inputs, ar_set_combined, ar_set_grid

logger = logging.getLogger(__name__)

AR_GUIDANCE = (
    "The constructed instrument does not identify the treatment effect reliably. "
    "Run `mlss-iv ar` with the same flags for weak-instrument-robust confidence sets."
)


class _DataCommand(Command):
    """Shared flags and data preparation for commands that read a CSV."""

    def get_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog=self.name,
            description=self.description,
            add_help=False
        )
        parser.add_argument('--data', help='CSV with columns y, d_*, w_* and optional x_*')
        parser.add_argument('--config', help='TOML file with a [run] table of defaults')
        parser.add_argument('--folds', type=int, help='Number of cross-fitting folds K (default: 2)')
        parser.add_argument('--learner',
                            help='Learner kind or JSON spec, e.g. \'{"kind": "random_forest", "params": {"n_trees": 100}}\' '
                                 '(default: gradient_boosting)')
        parser.add_argument('--weighting', help='identity or efficient (default: identity)')
        parser.add_argument('--covariate-mode', dest='covariate_mode',
                            help='partial_linear, conditional_mean_only or partial_out (default: partial_linear)')
        parser.add_argument('--alpha', type=float, help='Test level (default: 0.05)')
        parser.add_argument('--seed', type=int, help='Seed for folds and learners (default: 0)')
        parser.add_argument('--out', help='Report path (default: stdout)')
        parser.add_argument('--format', help='json or csv (default: json)')
        parser.add_argument('--hc1', type=str2bool, help='HC1 degrees-of-freedom correction (default: false)')
        parser.add_argument('--strict', type=str2bool,
                            help='Reject CSV columns without a role prefix (default: true)')
        return parser

    def resolve_config(self, args: List[str]) -> Optional[RunConfig]:
        parsed = self.parse_args(args)
        if parsed is None:
            return None
        flags = {key: getattr(parsed, key, None) for key in RUN_KEYS}
        try:
            file_values = load_toml_config(parsed.config) if parsed.config else {}
            return RunConfig.resolve(self.name, file_values, flags)
        except FileNotFoundError as exc:
            print(f"Error: {exc}", file=sys.stderr)
        except ConfigError as exc:
            print_problems(exc.problems)
        return None

    def build_instrument(self, config: RunConfig, n_jobs: int) -> Tuple[Dataset, InstrumentMatrix]:
        ds = load_csv(config.data, strict=config.strict)
        folds = make_folds(ds.n, config.folds, config.seed)
        print(f"Loaded {ds.n} rows from {config.data}; cross-fitting {config.learner.kind} "
              f"over {config.folds} folds", file=sys.stderr)
        inst = generate_instrument(
            ds, folds, config.learner, config.weighting,
            covariate_mode=config.covariate_mode, n_jobs=n_jobs,
        )
        return ds, inst


def _names(ds: Dataset) -> Tuple[str, ...]:
    return ("const",) + ds.d_names + ds.x_names


class EstimateCommand(_DataCommand):
    """Cross-fitted plug-in IV estimate with robust standard errors."""

    @property
    def name(self) -> str:  # pragma: no cover - trivial property
        return "estimate"

    @property
    def description(self) -> str:  # pragma: no cover
        return "Estimate (alpha, tau, beta) with a cross-fitted instrument; report SEs, Wald CIs, F and R2."

    def execute(self, args: List[str]) -> int:
        config = self.resolve_config(args)
        if config is None:
            return EXIT_INPUT_ERROR
        formatter = ReportFormatter(config.alpha)
        try:
            ds, inst = self.build_instrument(config, threads_from_env())
        except (FileNotFoundError, DataError, LearnerError, ConfigError) as exc:
            print(f"Error: {exc}", file=sys.stderr)
            return EXIT_INPUT_ERROR
        except WeakIdentificationError as exc:
            return self._weak_identification(config, exc, None)

        pair = design_matrices(ds)
        try:
            est = mlss_estimate(inst, pair, ds.y, hc1=config.hc1, names=_names(ds))
        except WeakIdentificationError as exc:
            return self._weak_identification(config, exc, inst)

        hausman = self._hausman(ds, est, formatter)
        report = formatter.format_estimate(
            est, inst,
            config=config.to_dict(),
            fold_estimates=per_fold_estimates(inst, pair, ds.y),
            hausman=hausman,
            forbidden=self._forbidden(inst, pair, ds.y),
        )
        emit_report(report, config.out, config.format, rows=formatter.coefficient_rows(est))
        return EXIT_OK

    def _weak_identification(self, config: RunConfig, exc: WeakIdentificationError,
                             inst: Optional[InstrumentMatrix]) -> int:
        """Write the partial report that points to AR inference."""
        print(f"Weak identification: {exc}", file=sys.stderr)
        report: Dict[str, Any] = {
            "command": self.name,
            "status": "weak_identification",
            "config": config.to_dict(),
            "condition_number": exc.condition_number,
            "error": str(exc),
            "guidance": AR_GUIDANCE,
        }
        if inst is not None:
            report.update(
                n=inst.n,
                pooled_oos_r2=list(inst.pooled_oos_r2),
                fold_oos_r2=[
                    {"fold": d.fold, "n_train": d.n_train, "n_eval": d.n_eval, "oos_r2": list(d.oos_r2)}
                    for d in inst.fold_diagnostics
                ],
                warnings=list(inst.warnings),
            )
        emit_report(report, config.out)
        return EXIT_WEAK_IDENTIFICATION

    @staticmethod
    def _forbidden(inst: InstrumentMatrix, pair: DesignPair, y: np.ndarray) -> Optional[EstimateResult]:
        if inst.weighting is not WeightingScheme.IDENTITY:
            return None
        try:
            return forbidden_regression(inst, pair, y)
        except MLSSError as exc:
            logger.warning("forbidden-regression contrast skipped: %s", exc)
            return None

    @staticmethod
    def _hausman(ds: Dataset, est: EstimateResult, formatter: ReportFormatter) -> Optional[Dict[str, Any]]:
        try:
            baseline = tsls(ds, "linear")
            result = hausman_test(baseline, est, est.tau_index)
        except MLSSError as exc:
            logger.warning("Hausman contrast against TSLS skipped: %s", exc)
            return None
        return formatter.format_hausman(result, against="tsls_linear")


class ARCommand(_DataCommand):
    """Anderson-Rubin confidence sets from the cross-fitted instrument."""

    @property
    def name(self) -> str:  # pragma: no cover - trivial property
        return "ar"

    @property
    def description(self) -> str:  # pragma: no cover
        return "Per-fold Anderson-Rubin sets at level alpha/K and their Bonferroni intersection."

    def get_parser(self) -> argparse.ArgumentParser:
        parser = super().get_parser()
        parser.add_argument('--tau-grid', dest='tau_grid',
                            help='lo:hi:step grid for AR evaluation (required with several treatments)')
        return parser

    def execute(self, args: List[str]) -> int:
        config = self.resolve_config(args)
        if config is None:
            return EXIT_INPUT_ERROR
        formatter = ReportFormatter(config.alpha)
        try:
            grid = parse_tau_grid(config.tau_grid) if config.tau_grid else None
            ds, inst = self.build_instrument(config, threads_from_env())
            if ds.p_d > 1 and grid is None:
                raise ConfigError(f"{ds.p_d} treatments: closed-form sets need one treatment, pass --tau-grid")
            inputs = ar_fold_inputs(inst, ds)
        except (FileNotFoundError, DataError, LearnerError) as exc:
            print(f"Error: {exc}", file=sys.stderr)
            return EXIT_INPUT_ERROR
        except WeakIdentificationError as exc:
            print(f"Weak identification while building the instrument: {exc}", file=sys.stderr)
            return EXIT_WEAK_IDENTIFICATION
        except ConfigError as exc:
            print_problems(exc.problems)
            return EXIT_INPUT_ERROR

        k = len(inputs)
        warnings: List[str] = []
        pair = design_matrices(ds)
        tau_hat = None
        try:
            est = mlss_estimate(inst, pair, ds.y, names=_names(ds))
            tau_hat = float(est.tau[0])
        except WeakIdentificationError as exc:
            warnings.append(f"no point estimate: {exc}")

        combined = None
        grid_report = None
        try:
            if ds.p_d == 1:
                combined = ar_set_combined(inputs, config.alpha, k)
                if not combined.finite:
                    warnings.append(
                        f"combined Anderson-Rubin set has shape {combined.shape}; the instrument may be weak"
                    )
            if grid is not None:
                grid_report = self._grid_report(inputs, grid, config.alpha / k, ds.p_d)
        except DataError as exc:
            print(f"Error: {exc}", file=sys.stderr)
            return EXIT_INPUT_ERROR

        report = formatter.format_ar(
            combined,
            k=k,
            config=config.to_dict(),
            tau_hat=tau_hat,
            fold_estimates=per_fold_estimates(inst, pair, ds.y),
            names=_names(ds),
            grid=grid_report,
            warnings=warnings + list(inst.warnings),
        )
        emit_report(report, config.out)
        return EXIT_OK

    @staticmethod
    def _grid_report(inputs, grid: np.ndarray, fold_alpha: float, p_d: int) -> Dict[str, Any]:
        if p_d == 1:
            taus = grid
        else:
            # the same 1-D grid for every treatment, as a product grid
            mesh = np.meshgrid(*([grid] * p_d), indexing="ij")
            taus = np.column_stack([m.ravel() for m in mesh])
        accepted = [ar_set_grid(inp, taus, fold_alpha) for inp in inputs]
        both = np.logical_and.reduce(accepted)
        return {
            "taus": taus.tolist(),
            "fold_alpha": fold_alpha,
            "accepted_by_fold": [a.tolist() for a in accepted],
            "accepted": both.tolist(),
            "n_accepted": int(both.sum()),
        }
