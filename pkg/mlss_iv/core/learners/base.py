"""
Learner specification, the fit/predict contract shared by every first-stage
learner, and the out-of-sample R² diagnostic.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import attrs
import numpy as np

from mlss_iv.core.errors import ConfigError, DimensionMismatchError, LearnerError
from mlss_iv.core.learners.linear import DiscretizedModel, OLSModel, PolynomialModel
from mlss_iv.core.learners.trees import GradientBoostingModel, RandomForestModel

logger = logging.getLogger(__name__)

TruthFn = Callable[[np.ndarray], np.ndarray]

LEARNER_KINDS = ("ols", "polynomial", "discretized", "random_forest", "gradient_boosting", "oracle")

DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "ols": {"ridge_scale": 1e-8},
    "polynomial": {"degree": 2, "interactions": False, "ridge_scale": 1e-8},
    "discretized": {"thresholds": [-1.0, 0.0, 1.0]},
    "random_forest": {
        "n_trees": 200,
        "max_depth": 8,
        "min_leaf": 5,
        "max_features": "sqrt",
        "bootstrap": True,
        "n_jobs": 1,
    },
    "gradient_boosting": {"n_trees": 200, "max_depth": 3, "learning_rate": 0.1, "min_leaf": 5},
    "oracle": {},
}

#: Nuisance names understood by ``LearnerSpec.for_nuisance``.
NUISANCES = ("d", "x", "u2", "xu2", "dres")


def _int_at_least(params: Mapping[str, Any], key: str, low: int, problems: List[str], kind: str) -> None:
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < low:
        problems.append(f"{kind}.{key} must be an integer >= {low}, got {value!r}")


def _is_number(value: Any, ok: Callable[[float], bool]) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
        return False
    return math.isfinite(value) and ok(value)


def _check_params(kind: str, params: Mapping[str, Any]) -> List[str]:
    problems: List[str] = []
    unknown = sorted(set(params) - set(DEFAULT_PARAMS[kind]))
    if unknown:
        problems.append(f"{kind}: unknown hyperparameters {unknown}; valid: {sorted(DEFAULT_PARAMS[kind])}")
        return problems
    if "ridge_scale" in params and not _is_number(params["ridge_scale"], lambda v: v > 0):
        problems.append(f"{kind}.ridge_scale must be a positive number, got {params['ridge_scale']!r}")
    if kind == "polynomial":
        if isinstance(params["degree"], bool) or params["degree"] not in (1, 2, 3):
            problems.append(f"polynomial.degree must be 1, 2 or 3, got {params['degree']!r}")
        if not isinstance(params["interactions"], bool):
            problems.append("polynomial.interactions must be true or false")
    elif kind == "discretized":
        cuts = params["thresholds"]
        flat = cuts if not cuts or not isinstance(cuts[0], (list, tuple)) else [c for col in cuts for c in col]
        if not all(isinstance(c, (int, float)) and math.isfinite(c) for c in flat):
            problems.append("discretized.thresholds must be finite numbers")
    elif kind in ("random_forest", "gradient_boosting"):
        _int_at_least(params, "n_trees", 1 if kind == "random_forest" else 0, problems, kind)
        _int_at_least(params, "max_depth", 1, problems, kind)
        _int_at_least(params, "min_leaf", 1, problems, kind)
        if kind == "gradient_boosting":
            lr = params["learning_rate"]
            if not _is_number(lr, lambda v: 0 < v <= 1):
                problems.append(f"gradient_boosting.learning_rate must lie in (0, 1], got {lr!r}")
        else:
            mf = params["max_features"]
            if not (mf is None or mf == "sqrt" or (isinstance(mf, int) and mf >= 1)
                    or (isinstance(mf, float) and 0 < mf <= 1)):
                problems.append(f"random_forest.max_features must be 'sqrt', a positive int or a fraction, got {mf!r}")
            if not isinstance(params["bootstrap"], bool):
                problems.append("random_forest.bootstrap must be true or false")
            _int_at_least(params, "n_jobs", 1, problems, kind)
    return problems


@attrs.frozen(eq=False)
class LearnerSpec:
    """
    Which learner to fit and how.

    ``params`` holds only overrides; ``resolved_params`` merges them over the
    kind's defaults. The oracle kind carries ``truth``: either one callable or
    a mapping from nuisance name (``d``, ``x``, ``u2``, ``xu2``, ``dres``) to
    callable. Oracles are for simulations only.
    """

    kind: str
    params: Dict[str, Any] = attrs.field(factory=dict, converter=dict)
    seed: int = 0
    truth: Union[TruthFn, Mapping[str, TruthFn], None] = None

    def __attrs_post_init__(self) -> None:
        problems = self.validate()
        if problems:
            raise ConfigError(problems)

    def validate(self) -> List[str]:
        if self.kind not in LEARNER_KINDS:
            return [f"unknown learner kind {self.kind!r}; valid kinds: {', '.join(LEARNER_KINDS)}"]
        problems = _check_params(self.kind, self.resolved_params())
        if self.kind == "oracle" and self.truth is None:
            problems.append("oracle learner requires a truth function")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            problems.append(f"seed must be an integer, got {self.seed!r}")
        return problems

    def resolved_params(self) -> Dict[str, Any]:
        merged = dict(DEFAULT_PARAMS.get(self.kind, {}))
        merged.update(self.params)
        return merged

    def for_nuisance(self, name: str) -> "LearnerSpec":
        """The spec to use for one nuisance (d, x, u2, xu2, dres); resolves mapping-valued oracle truths."""
        if self.kind != "oracle" or callable(self.truth):
            return self
        if name not in self.truth:
            raise LearnerError(f"oracle has no truth for nuisance {name!r} (has {sorted(self.truth)})")
        return attrs.evolve(self, truth=self.truth[name])

    def with_seed(self, seed: int) -> "LearnerSpec":
        return attrs.evolve(self, seed=int(seed))

    def to_dict(self) -> Dict[str, Any]:
        """JSON form ``{"kind", "params", "seed"}``; the oracle truth is not serialisable."""
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LearnerSpec":
        extra = sorted(set(data) - {"kind", "params", "seed"})
        if extra:
            raise ConfigError(f"unknown learner keys {extra}")
        if "kind" not in data:
            raise ConfigError("learner is missing 'kind'")
        params = data.get("params", {})
        if not isinstance(params, Mapping):
            raise ConfigError(f"learner params must be a table of hyperparameters, got {params!r}")
        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise ConfigError(f"learner seed must be an integer, got {seed!r}")
        return cls(kind=data["kind"], params=dict(params), seed=int(seed))


class _ConstantModel:
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.value)


class _OracleModel:
    def __init__(self, truth: TruthFn, column: int, n_targets: int):
        self.truth = truth
        self.column = column
        self.n_targets = n_targets

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.truth(x), dtype=float)
        if out.ndim == 1:
            if self.n_targets != 1:
                raise LearnerError(f"oracle truth returned one column for {self.n_targets} targets")
            return out
        return out[:, self.column]


@attrs.frozen(eq=False)
class Predictor:
    """A fitted learner: one model per target column."""

    spec: LearnerSpec
    models: Tuple[Any, ...]
    n_features: int
    n_targets: int
    warnings: Tuple[str, ...] = ()

    @property
    def is_constant_fallback(self) -> bool:
        return any(isinstance(m, _ConstantModel) for m in self.models)


def _build_model(spec: LearnerSpec, params: Dict[str, Any], column: int):
    kind = spec.kind
    if kind == "ols":
        return OLSModel(ridge_scale=params["ridge_scale"])
    if kind == "polynomial":
        return PolynomialModel(params["degree"], params["interactions"], params["ridge_scale"])
    if kind == "discretized":
        return DiscretizedModel(params["thresholds"])
    if kind == "random_forest":
        return RandomForestModel(
            n_trees=params["n_trees"],
            max_depth=params["max_depth"],
            min_leaf=params["min_leaf"],
            max_features=params["max_features"],
            bootstrap=params["bootstrap"],
            seed=spec.seed,
            n_jobs=params["n_jobs"],
        )
    if kind == "gradient_boosting":
        return GradientBoostingModel(
            n_trees=params["n_trees"],
            max_depth=params["max_depth"],
            learning_rate=params["learning_rate"],
            min_leaf=params["min_leaf"],
        )
    raise LearnerError(f"unknown learner kind {kind!r}")  # pragma: no cover


def _as_matrix(values: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise LearnerError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def fit(spec: LearnerSpec, features: np.ndarray, targets: np.ndarray) -> Predictor:
    """
    Fit ``spec`` on (features, targets); each target column gets its own model.

    Rank-deficient linear designs use a ridge fallback and tree learners with
    fewer rows than ``min_leaf`` fall back to the training mean. Both are
    reported in ``Predictor.warnings``, never raised.
    """
    x = _as_matrix(features, "features")
    y = _as_matrix(targets, "targets")
    m, q = x.shape
    if y.shape[0] != m:
        raise LearnerError(f"features have {m} rows but targets have {y.shape[0]}")
    if m < 2:
        raise LearnerError(f"at least 2 training rows are required, got {m}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise LearnerError("training data contains non-finite values")

    params = spec.resolved_params()
    models = []
    warnings: List[str] = []
    for col in range(y.shape[1]):
        if spec.kind == "oracle":
            models.append(_OracleModel(spec.truth, col, y.shape[1]))
            continue
        if spec.kind in ("random_forest", "gradient_boosting") and m < params["min_leaf"]:
            msg = f"{spec.kind}: {m} rows is below min_leaf={params['min_leaf']}, using the training mean"
            logger.warning(msg)
            warnings.append(msg)
            models.append(_ConstantModel(np.mean(y[:, col])))
            continue
        model = _build_model(spec, params, col).fit(x, y[:, col])
        warnings.extend(getattr(model, "warnings", []))
        models.append(model)

    return Predictor(spec=spec, models=tuple(models), n_features=q, n_targets=y.shape[1], warnings=tuple(warnings))


def predict(p: Predictor, features: np.ndarray) -> np.ndarray:
    """Predictions of shape (m', r)."""
    x = _as_matrix(features, "features")
    if x.shape[1] != p.n_features:
        raise DimensionMismatchError(f"predictor was fitted on {p.n_features} features, got {x.shape[1]}")
    out = np.column_stack([model.predict(x) for model in p.models])
    if not np.all(np.isfinite(out)):
        raise LearnerError(f"{p.spec.kind} produced non-finite predictions")
    return out


def oos_r2(pred: np.ndarray, actual: np.ndarray, train_mean: float) -> float:
    """
    Out-of-sample R²: 1 - Σ(actual - pred)² / Σ(actual - train_mean)².

    When the baseline sum is zero the result is 0 for a perfect prediction and
    -inf (logged as degenerate) otherwise.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise ValueError(f"pred has length {pred.size} but actual has length {actual.size}")
    if pred.size < 1:
        raise ValueError("oos_r2 needs at least one observation")
    num = float(np.sum((actual - pred) ** 2))
    den = float(np.sum((actual - train_mean) ** 2))
    if den == 0.0:
        if num == 0.0:
            return 0.0
        logger.warning("degenerate out-of-sample R2: hold-out targets equal the training mean")
        return float("-inf")
    return 1.0 - num / den
