"""
Resolved settings for one CLI run: defaults, then a TOML ``[run]`` table, then flags.
"""

from __future__ import annotations

import json
import os
from typing import Any, Dict, List, Mapping, Optional

import attrs
import toml

from mlss_iv.core.errors import ConfigError
from mlss_iv.core.instruments import CovariateMode, WeightingScheme
from mlss_iv.core.learners import LearnerSpec

COMMANDS = ("estimate", "ar", "simulate")
FORMATS = ("json", "csv")
DEFAULT_LEARNER = "gradient_boosting"

#: Keys accepted in the ``[run]`` table; they mirror the long flag names.
RUN_KEYS = (
    "data", "folds", "learner", "weighting", "covariate_mode", "alpha", "seed",
    "out", "format", "tau_grid", "hc1", "strict",
)


def parse_learner(value: Any, seed: int = 0) -> LearnerSpec:
    """A learner kind name, an inline JSON object, or an already-parsed mapping."""
    if isinstance(value, LearnerSpec):
        return value
    if isinstance(value, str):
        text = value.strip()
        if text.startswith("{"):
            try:
                value = json.loads(text)
            except ValueError as exc:
                raise ConfigError(f"--learner is not valid JSON: {exc}") from exc
        else:
            if text == "oracle":
                raise ConfigError("the oracle learner needs truth functions and is only available in simulations")
            return LearnerSpec(kind=text, seed=seed)
    if isinstance(value, Mapping):
        data = dict(value)
        data.setdefault("seed", seed)
        return LearnerSpec.from_dict(data)
    raise ConfigError(f"cannot read a learner from {value!r}")


def load_toml_config(config_path: str) -> Dict[str, Any]:
    """The ``[run]`` table of a TOML file."""
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")
    try:
        config_dict = toml.load(config_path)
    except (toml.TomlDecodeError, OSError) as e:
        raise ConfigError(f"Failed to parse TOML config: {e}")
    run = config_dict.get("run", {})
    unknown = sorted(set(run) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown keys in [run]: {unknown}; valid: {', '.join(RUN_KEYS)}")
    return run


@attrs.frozen
class RunConfig:
    """Validated settings for ``estimate`` and ``ar``."""

    command: str
    data: Optional[str] = None
    folds: int = 2
    learner: LearnerSpec = attrs.field(factory=lambda: LearnerSpec(kind=DEFAULT_LEARNER))
    weighting: str = WeightingScheme.IDENTITY.value
    covariate_mode: str = CovariateMode.PARTIAL_LINEAR.value
    alpha: float = 0.05
    seed: int = 0
    out: Optional[str] = None
    format: str = "json"
    tau_grid: Optional[str] = None
    hc1: bool = False
    strict: bool = True

    def validate(self) -> List[str]:
        problems = []
        if self.command not in COMMANDS:
            problems.append(f"unknown command {self.command!r}")
        if self.command in ("estimate", "ar") and not self.data:
            problems.append("--data is required")
        if isinstance(self.folds, bool) or not isinstance(self.folds, int) or self.folds < 2:
            problems.append(f"--folds must be an integer >= 2, got {self.folds!r}")
        if self.weighting not in [w.value for w in WeightingScheme]:
            problems.append(f"--weighting must be identity or efficient, got {self.weighting!r}")
        if self.covariate_mode not in [m.value for m in CovariateMode]:
            problems.append(
                f"--covariate-mode must be one of {', '.join(m.value for m in CovariateMode)}, got {self.covariate_mode!r}"
            )
        if isinstance(self.alpha, bool) or not isinstance(self.alpha, (int, float)) or not 0.0 < self.alpha < 1.0:
            problems.append(f"--alpha must be a number in (0, 1), got {self.alpha!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            problems.append(f"--seed must be an integer, got {self.seed!r}")
        if self.format not in FORMATS:
            problems.append(f"--format must be json or csv, got {self.format!r}")
        for key in ("data", "out", "tau_grid"):
            value = getattr(self, key)
            if value is not None and not isinstance(value, str):
                problems.append(f"{key} must be a string, got {value!r}")
        for key in ("hc1", "strict"):
            if not isinstance(getattr(self, key), bool):
                problems.append(f"{key} must be true or false, got {getattr(self, key)!r}")
        return problems

    @classmethod
    def resolve(cls, command: str, file_values: Mapping[str, Any], flag_values: Mapping[str, Any]) -> "RunConfig":
        """
        Layer flag values over file values over defaults and validate.

        Raises:
            ConfigError: carrying every problem found
        """
        merged: Dict[str, Any] = {}
        merged.update({k: v for k, v in file_values.items() if v is not None})
        merged.update({k: v for k, v in flag_values.items() if v is not None})
        seed = merged.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            seed = 0
        problems: List[str] = []
        if "learner" in merged:
            try:
                merged["learner"] = parse_learner(merged["learner"], seed)
            except ConfigError as exc:
                problems.extend(exc.problems)
                merged.pop("learner")
        else:
            merged["learner"] = LearnerSpec(kind=DEFAULT_LEARNER, seed=seed)
        config = cls(command=command, **merged)
        problems.extend(config.validate())
        if problems:
            raise ConfigError(problems)
        return config

    def to_dict(self) -> Dict[str, Any]:
        """The resolved settings, embedded in every report."""
        out = attrs.asdict(self, filter=lambda a, _: a.name != "learner")
        out["learner"] = self.learner.to_dict()
        return out

