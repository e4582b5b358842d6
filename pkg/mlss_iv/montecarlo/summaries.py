"""
Summaries of Monte Carlo output: winsorized dispersion, interval coverage
and the extra-sample error of a fixed instrument.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Callable, Iterable, Optional, Union

import numpy as np

from mlss_iv.core.data_model import Dataset
from mlss_iv.montecarlo.dgp import SimDataset

logger = logging.getLogger(__name__)

#: Clip at the 1st and 99th percentiles unless told otherwise.
DEFAULT_WINSOR_Q = 0.01

#: A (lo, hi) pair, an object with ``contains``, or None for the empty set.
IntervalLike = Any


def winsorized_sd(values: Iterable[float], q: float = DEFAULT_WINSOR_Q) -> float:
    """
    Sample standard deviation (ddof=1) after clipping to the empirical
    [q, 1-q] quantiles, with linearly interpolated quantiles.

    Raises:
        ValueError: with fewer than two values or q outside (0, 0.5)
    """
    arr = np.asarray(list(values), dtype=float)
    if not 0.0 < q < 0.5:
        raise ValueError(f"winsorization quantile must lie in (0, 0.5), got {q}")
    if arr.size < 2:
        raise ValueError(f"winsorized_sd needs at least two values, got {arr.size}")
    lo, hi = np.quantile(arr, [q, 1.0 - q], method="linear")
    clipped = np.clip(arr, lo, hi)
    if np.all(clipped == clipped[0]):
        return 0.0
    return float(np.std(clipped, ddof=1))


def _contains(interval: IntervalLike, truth: float) -> bool:
    if interval is None:
        return False
    if hasattr(interval, "contains"):
        return bool(interval.contains(truth))
    lo, hi = interval
    return bool(lo <= truth <= hi)


def coverage(intervals: Iterable[IntervalLike], truth: float) -> float:
    """Share of the sets that contain ``truth``; ``None`` stands for an empty set."""
    items = list(intervals)
    if not items:
        raise ValueError("coverage needs at least one interval")
    return sum(_contains(s, truth) for s in items) / len(items)


def extra_sample_error(
    upsilon: Callable[[np.ndarray], np.ndarray],
    fresh: Union[SimDataset, Dataset],
    tau: Optional[float] = None,
) -> float:
    """
    n·(cov_n(υ̂, Y) / cov_n(υ̂, D) - τ)² on a sample independent of υ̂'s training data.

    Returns +inf, with a warning, when cov_n(υ̂, D) is zero.
    """
    if isinstance(fresh, SimDataset):
        tau = fresh.tau if tau is None else tau
        fresh = fresh.dataset
    if tau is None:
        raise ValueError("tau is required when a plain Dataset is passed")
    ups = np.asarray(upsilon(fresh.w), dtype=float).reshape(fresh.n, -1)[:, 0]
    ups_c = ups - ups.mean()
    cov_d = float(ups_c @ (fresh.d[:, 0] - fresh.d[:, 0].mean())) / fresh.n
    if cov_d == 0.0:
        logger.warning("extra-sample error undefined: instrument is uncorrelated with D in sample")
        return math.inf
    cov_y = float(ups_c @ (fresh.y - fresh.y.mean())) / fresh.n
    return fresh.n * (cov_y / cov_d - tau) ** 2
