"""
Weights that express an IV estimand as an average of marginal treatment effects.
"""

from __future__ import annotations

import numpy as np

from mlss_iv.core.errors import DataError


def mte_weights(a: np.ndarray, b: np.ndarray, mu: np.ndarray, v_grid: np.ndarray) -> np.ndarray:
    """
    Sample plug-in of ω(v) = E[a·b̃·1(μ > v)] / E[a·b̃·μ] with b̃ = b - Σaᵢbᵢ / Σaᵢ.

    Args:
        a: Nonnegative weights aᵢ = a(Wᵢ)
        b: Instrument transform bᵢ = b(Wᵢ)
        mu: Propensity μ(Wᵢ) in [0, 1]
        v_grid: Sorted evaluation points in [0, 1]

    Raises:
        DataError: for invalid inputs or a zero denominator
    """
    a, b, mu = (np.asarray(arr, dtype=float).ravel() for arr in (a, b, mu))
    grid = np.asarray(v_grid, dtype=float).ravel()
    if not (a.shape == b.shape == mu.shape) or a.size == 0:
        raise DataError(f"a, b and mu must share a nonzero length, got {a.size}, {b.size}, {mu.size}")
    if np.any(a < 0) or a.mean() <= 0:
        raise DataError("a must be nonnegative with a positive mean")
    if np.any(mu < 0) or np.any(mu > 1):
        raise DataError("mu must lie in [0, 1]")
    if np.any(np.diff(grid) < 0):
        raise DataError("v_grid must be sorted")

    b_tilde = b - np.sum(a * b) / np.sum(a)
    contrib = a * b_tilde
    denom = float(np.mean(contrib * mu))
    if denom == 0.0 or abs(denom) <= 1e-14 * float(np.mean(np.abs(contrib))):
        raise DataError("MTE weights are undefined: E[a b~ mu] is zero")

    order = np.argsort(mu, kind="stable")
    mu_sorted = mu[order]
    # tail[k] = sum of contributions of the rows ranked k and above
    tail = np.concatenate([np.cumsum(contrib[order][::-1])[::-1], [0.0]])
    above = tail[np.searchsorted(mu_sorted, grid, side="right")]
    return above / a.size / denom
