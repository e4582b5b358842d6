"""
Monte Carlo experiment runner.

An experiment draws R fresh datasets for each sample size, runs every
estimator on the menu against the same draw, and aggregates per-(estimator, n)
cells. Each replication's seed is derived from (master seed, replication, n)
before any work starts, so the report does not depend on worker count or
scheduling.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import attrs
import cattrs
import numpy as np
import toml
from cattrs.gen import make_dict_structure_fn, make_dict_unstructure_fn, override
from joblib import Parallel, delayed

from mlss_iv.core.data_model import FoldAssignment, design_matrices, make_folds
from mlss_iv.core.errors import ConfigError, MLSSError
from mlss_iv.core.estimator import F_RULE_OF_THUMB, TSLS_TRANSFORMS, mlss_estimate, tsls_instrument
from mlss_iv.core.instruments import CovariateMode, WeightingScheme, generate_instrument
from mlss_iv.core.learners import LearnerSpec
from mlss_iv.core.report_formatter import unstructure
from mlss_iv.core.weak_iv import ARFoldInput, ARSet, ar_fold_inputs, ar_set_combined, ar_set_fold, wald_ci
from mlss_iv.montecarlo.dgp import DGPS, TRUE_TAU, SimDataset
from mlss_iv.montecarlo.summaries import DEFAULT_WINSOR_Q, coverage, winsorized_sd
from mlss_iv.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

#: Menu name -> (learner kind, params). "oracle" is resolved per replication.
BASE_LEARNERS: Dict[str, Tuple[str, Dict[str, Any]]] = {
    "oracle": ("oracle", {}),
    "lgb": ("gradient_boosting", {}),
    "rf": ("random_forest", {}),
    "discretized": ("discretized", {}),
    "lin": ("polynomial", {"degree": 1}),
    "quad": ("polynomial", {"degree": 2, "interactions": False}),
    "quad_interact": ("polynomial", {"degree": 2, "interactions": True}),
    "cubic_interact": ("polynomial", {"degree": 3, "interactions": True}),
    "ols": ("ols", {}),
}
SUFFIXES = ("_eff", "_cmo", "_fwl", "_full")
TSLS_PREFIX = "tsls_"


@attrs.frozen
class MenuEntry:
    """One parsed estimator name."""

    name: str
    base: str
    tsls: bool = False
    efficient: bool = False
    covariate_mode: Optional[CovariateMode] = None
    full_sample: bool = False


def parse_estimator(name: str) -> MenuEntry:
    """
    Parse a menu name: a base learner (``lgb``, ``rf``, ``lin``, ...) with
    optional ``_eff``, ``_cmo``, ``_fwl`` and ``_full`` suffixes, or
    ``tsls_<transform>``.

    Raises:
        ConfigError: listing the valid names
    """
    if name.startswith(TSLS_PREFIX):
        transform = name[len(TSLS_PREFIX):]
        if transform not in TSLS_TRANSFORMS:
            raise ConfigError(f"unknown estimator {name!r}; TSLS transforms are {', '.join(TSLS_TRANSFORMS)}")
        return MenuEntry(name=name, base=transform, tsls=True)
    base, found = name, set()
    stripped = True
    while stripped:
        stripped = False
        for suffix in SUFFIXES:
            if base.endswith(suffix) and suffix not in found:
                base = base[: -len(suffix)]
                found.add(suffix)
                stripped = True
    if base not in BASE_LEARNERS:
        raise ConfigError(f"unknown estimator {name!r}; valid names: {', '.join(valid_estimator_names())}")
    if {"_cmo", "_fwl"} <= found:
        raise ConfigError(f"estimator {name!r} combines two covariate paths")
    mode = None
    if "_cmo" in found:
        mode = CovariateMode.CONDITIONAL_MEAN_ONLY
    elif "_fwl" in found:
        mode = CovariateMode.PARTIAL_OUT
    return MenuEntry(name=name, base=base, efficient="_eff" in found, covariate_mode=mode,
                     full_sample="_full" in found)


def valid_estimator_names() -> List[str]:
    names = [b + s for b in BASE_LEARNERS for s in ("",) + SUFFIXES]
    return names + [TSLS_PREFIX + t for t in TSLS_TRANSFORMS]


@attrs.frozen
class ExperimentConfig:
    """
    Experiment definition. JSON/TOML keys: ``dgp``, ``n``, ``reps``,
    ``estimators``, ``K``, ``weighting``, ``alpha``, ``seed``, ``winsor_q``,
    plus the optional ``covariate_mode`` and ``learner_params`` (overrides per
    learner kind, e.g. ``{"gradient_boosting": {"n_trees": 100}}``).
    """

    dgp: str
    n: List[int]
    reps: int
    estimators: List[str]
    folds: int = 2
    weighting: str = "identity"
    alpha: float = 0.05
    seed: int = 0
    winsor_q: float = DEFAULT_WINSOR_Q
    covariate_mode: str = "partial_linear"
    learner_params: Dict[str, Dict[str, Any]] = attrs.field(factory=dict)

    def validate(self) -> List[str]:
        """Every problem with the configuration, not just the first."""
        problems: List[str] = []
        if self.dgp not in DGPS:
            problems.append(f"dgp must be one of {', '.join(DGPS)}, got {self.dgp!r}")
        if not self.n:
            problems.append("n must list at least one sample size")
        for n in self.n:
            if n < 2 * max(self.folds, 2):
                problems.append(f"sample size {n} is too small for {self.folds} folds")
        if self.reps < 1:
            problems.append(f"reps must be >= 1, got {self.reps}")
        if not self.estimators:
            problems.append("estimators must name at least one estimator")
        for name in self.estimators:
            try:
                parse_estimator(name)
            except ConfigError as exc:
                problems.extend(exc.problems)
        if len(set(self.estimators)) != len(self.estimators):
            problems.append("estimators contains duplicates")
        if self.folds < 2:
            problems.append(f"K must be >= 2, got {self.folds}")
        if self.weighting not in {w.value for w in WeightingScheme}:
            problems.append(f"weighting must be identity or efficient, got {self.weighting!r}")
        if self.covariate_mode not in {m.value for m in CovariateMode}:
            problems.append(f"covariate_mode must be one of {[m.value for m in CovariateMode]}, got {self.covariate_mode!r}")
        if not 0.0 < self.alpha < 1.0:
            problems.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.winsor_q < 0.5:
            problems.append(f"winsor_q must lie in (0, 0.5), got {self.winsor_q}")
        for kind, params in self.learner_params.items():
            try:
                LearnerSpec(kind=kind, params=params, truth=(lambda w: w) if kind == "oracle" else None)
            except ConfigError as exc:
                problems.extend(exc.problems)
        return problems


_converter = cattrs.Converter(forbid_extra_keys=True)
_converter.register_structure_hook(
    ExperimentConfig,
    make_dict_structure_fn(ExperimentConfig, _converter, _cattrs_forbid_extra_keys=True, folds=override(rename="K")),
)
_converter.register_unstructure_hook(
    ExperimentConfig,
    make_dict_unstructure_fn(ExperimentConfig, _converter, folds=override(rename="K")),
)


def structure_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """
    Structure and validate a raw config mapping.

    Raises:
        ConfigError: carrying every structural and semantic problem found
    """
    try:
        config = _converter.structure(dict(data), ExperimentConfig)
    except cattrs.BaseValidationError as exc:
        raise ConfigError(cattrs.transform_error(exc)) from exc
    except cattrs.ForbiddenExtraKeysError as exc:
        raise ConfigError(f"unknown config keys: {sorted(exc.extra_fields)}") from exc
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    return config


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """Load a JSON (or, by suffix, TOML) experiment config."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"experiment config not found: {path}")
    text = path.read_text()
    try:
        data = toml.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (ValueError, toml.TomlDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return structure_config(data)


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    return _converter.unstructure(config)


@attrs.frozen
class ReplicationRecord:
    """One estimator on one simulated dataset; NaN fields mark a failure."""

    estimator: str
    n: int
    rep: int
    seed: int
    tau_hat: float = math.nan
    se: float = math.nan
    wald_lo: float = math.nan
    wald_hi: float = math.nan
    ar_shape: Optional[str] = None
    ar_covers: Optional[bool] = None
    oos_r2: float = math.nan
    first_stage_f: float = math.nan
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@attrs.frozen
class CellSummary:
    estimator: str
    n: int
    reps: int
    failures: int
    median_estimate: float
    winsorized_sd: float
    median_se: float
    median_abs_error: float
    wald_coverage: float
    ar_coverage: float
    pct_finite_ar: float
    median_oos_r2: float
    median_first_stage_f: float
    share_f_above_10: float


@attrs.frozen
class ExperimentReport:
    config: ExperimentConfig
    cells: Tuple[CellSummary, ...]
    records: Tuple[ReplicationRecord, ...]

    @property
    def master_seed(self) -> int:
        return self.config.seed

    @property
    def reps(self) -> int:
        return self.config.reps

    def cell(self, estimator: str, n: int) -> CellSummary:
        for c in self.cells:
            if c.estimator == estimator and c.n == n:
                return c
        raise KeyError((estimator, n))

    def to_report(self) -> Dict[str, Any]:
        """The JSON report; worker count is deliberately absent so it stays byte-stable."""
        return {
            "command": "simulate",
            "config": config_to_dict(self.config),
            "master_seed": self.master_seed,
            "reps": self.reps,
            "cells": [unstructure(c) for c in self.cells],
            "failures": sum(c.failures for c in self.cells),
        }

    def replication_rows(self) -> List[Dict[str, Any]]:
        return [unstructure(r) for r in self.records]


def _learner_for(entry: MenuEntry, config: ExperimentConfig, sim: SimDataset, seed: int) -> LearnerSpec:
    kind, params = BASE_LEARNERS[entry.base]
    if kind == "oracle":
        return sim.oracle_spec()
    merged = dict(params)
    merged.update(config.learner_params.get(kind, {}))
    return LearnerSpec(kind=kind, params=merged, seed=derive_seed(seed, entry.base))


def _run_estimator(entry: MenuEntry, config: ExperimentConfig, sim: SimDataset, folds: FoldAssignment,
                   seed: int, n: int, rep: int) -> ReplicationRecord:
    ds = sim.dataset
    oos = math.nan
    ar: Optional[ARSet] = None
    if entry.tsls:
        inst = tsls_instrument(ds, entry.base)
        est = mlss_estimate(inst, design_matrices(ds), ds.y, label=entry.name)
        ar = ar_set_fold(ARFoldInput(inst.excluded, ds.y, ds.d, ds.xbar), config.alpha)
    else:
        weighting = WeightingScheme.EFFICIENT if entry.efficient else WeightingScheme(config.weighting)
        mode = entry.covariate_mode or CovariateMode(config.covariate_mode)
        used = FoldAssignment.full(ds.n) if entry.full_sample else folds
        inst = generate_instrument(ds, used, _learner_for(entry, config, sim, seed), weighting, covariate_mode=mode)
        est = mlss_estimate(inst, design_matrices(ds), ds.y)
        oos = inst.pooled_oos_r2[0]
        ar = ar_set_combined(ar_fold_inputs(inst, ds), config.alpha)

    lo, hi = wald_ci(est, 1, config.alpha)
    f_stats = est.diagnostics.first_stage_f
    return ReplicationRecord(
        estimator=entry.name, n=n, rep=rep, seed=seed,
        tau_hat=float(est.tau[0]), se=float(est.tau_se[0]), wald_lo=lo, wald_hi=hi,
        ar_shape=ar.shape, ar_covers=ar.contains(sim.tau), oos_r2=float(oos),
        first_stage_f=float(f_stats[0].value) if f_stats else math.nan,
    )


def run_replication(config: ExperimentConfig, n: int, rep: int) -> List[ReplicationRecord]:
    """Draw one dataset and run the whole menu on it; failures become NaN records."""
    seed = derive_seed(config.seed, rep, n)
    sim = DGPS[config.dgp](n, seed)
    folds = make_folds(n, config.folds, derive_seed(seed, "folds"))
    records = []
    for name in config.estimators:
        entry = parse_estimator(name)
        try:
            records.append(_run_estimator(entry, config, sim, folds, seed, n, rep))
        except (MLSSError, ValueError, np.linalg.LinAlgError) as exc:
            logger.info("replication %d, n=%d, %s failed: %s", rep, n, name, exc)
            records.append(ReplicationRecord(estimator=name, n=n, rep=rep, seed=seed,
                                             error=f"{type(exc).__name__}: {exc}"))
    return records


def _median(values: List[float]) -> float:
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    return float(np.median(arr)) if arr.size else math.nan


def summarize_cell(records: List[ReplicationRecord], config: ExperimentConfig, tau: float) -> CellSummary:
    ok = [r for r in records if not r.failed]
    estimates = [r.tau_hat for r in ok]
    if len(ok) >= 2:
        wsd = winsorized_sd(estimates, config.winsor_q)
    else:
        wsd = 0.0 if ok else math.nan
    with_ar = [r for r in ok if r.ar_shape is not None]
    with_f = [r for r in ok if not math.isnan(r.first_stage_f)]
    return CellSummary(
        estimator=records[0].estimator,
        n=records[0].n,
        reps=len(records),
        failures=len(records) - len(ok),
        median_estimate=_median(estimates),
        winsorized_sd=wsd,
        median_se=_median([r.se for r in ok]),
        median_abs_error=_median([abs(e - tau) for e in estimates]),
        wald_coverage=coverage([(r.wald_lo, r.wald_hi) for r in ok], tau) if ok else math.nan,
        ar_coverage=float(np.mean([r.ar_covers for r in with_ar])) if with_ar else math.nan,
        pct_finite_ar=100.0 * float(np.mean([r.ar_shape == "finite_interval" for r in with_ar])) if with_ar else math.nan,
        median_oos_r2=_median([r.oos_r2 for r in ok]),
        median_first_stage_f=_median([r.first_stage_f for r in ok]),
        share_f_above_10=float(np.mean([r.first_stage_f > F_RULE_OF_THUMB for r in with_f])) if with_f else math.nan,
    )


def run_experiment(config: ExperimentConfig, *, n_jobs: int = 1) -> ExperimentReport:
    """
    Run every (n, replication) pair, in parallel when ``n_jobs > 1``.

    Estimator failures are recorded per cell and never abort the run.
    """
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    tasks = [(n, rep) for n in config.n for rep in range(config.reps)]
    logger.info("running %d replications of %s with %d worker(s)", len(tasks), config.dgp, n_jobs)
    if n_jobs == 1:
        batches = [run_replication(config, n, rep) for n, rep in tasks]
    else:
        batches = Parallel(n_jobs=n_jobs)(delayed(run_replication)(config, n, rep) for n, rep in tasks)
    records = [r for batch in batches for r in batch]

    tau = TRUE_TAU
    cells = []
    for n in config.n:
        for name in config.estimators:
            group = [r for r in records if r.n == n and r.estimator == name]
            cells.append(summarize_cell(group, config, tau))
    return ExperimentReport(config=config, cells=tuple(cells), records=tuple(records))
