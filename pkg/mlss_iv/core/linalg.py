"""
Dense linear-algebra helpers: pivoted-QR solves with ridge fallback,
conditioning checks, residualization and PSD pseudoinverses.
"""

from __future__ import annotations

import logging
from typing import NamedTuple, Tuple

import numpy as np
import scipy.linalg as sla

from mlss_iv.core.errors import WeakIdentificationError

logger = logging.getLogger(__name__)

#: Ĝ with a larger 2-norm condition number is treated as unidentified.
COND_LIMIT = 1e12
#: Relative |diag(R)| threshold below which a pivoted column counts as dependent.
RANK_TOL = 1e-10
#: Ridge penalty as a multiple of trace(A'A)/q.
RIDGE_SCALE = 1e-8


class LeastSquaresFit(NamedTuple):
    """Coefficients of a least-squares fit and whether the ridge fallback fired."""
    coef: np.ndarray
    ridge_used: bool
    rank: int


def _as_2d(b: np.ndarray) -> Tuple[np.ndarray, bool]:
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        return b[:, None], True
    return b, False


def numerical_rank(a: np.ndarray, tol: float = RANK_TOL) -> int:
    """Rank of ``a`` read off the diagonal of its column-pivoted R factor."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0
    _, r, _ = sla.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0
    return int(np.sum(diag > tol * diag[0]))


def least_squares(
    a: np.ndarray,
    b: np.ndarray,
    *,
    ridge_scale: float = RIDGE_SCALE,
    rank_tol: float = RANK_TOL,
) -> LeastSquaresFit:
    """
    Least-squares coefficients of ``b`` on the columns of ``a``.

    Full-rank designs are solved with column-pivoted QR. Rank-deficient designs
    fall back to ridge with penalty ``ridge_scale * trace(A'A) / q``; the fallback
    is reported through ``ridge_used`` rather than raised.

    Args:
        a: Design matrix, shape (m, q)
        b: Targets, shape (m,) or (m, r)

    Returns:
        LeastSquaresFit whose ``coef`` has shape (q,) or (q, r) to match ``b``
    """
    a = np.asarray(a, dtype=float)
    b2, was_vector = _as_2d(b)
    m, q = a.shape
    if q == 0:
        coef = np.zeros((0, b2.shape[1]))
        return LeastSquaresFit(coef[:, 0] if was_vector else coef, False, 0)

    qmat, r, perm = sla.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > rank_tol * diag[0])) if diag.size and diag[0] > 0 else 0

    if rank == q and m >= q:
        coef = np.empty((q, b2.shape[1]))
        coef[perm, :] = sla.solve_triangular(r, qmat.T @ b2)
        ridge_used = False
    else:
        gram = a.T @ a
        lam = ridge_scale * np.trace(gram) / q
        if lam <= 0.0:
            lam = ridge_scale
        coef = sla.solve(gram + lam * np.eye(q), a.T @ b2, assume_a="pos")
        ridge_used = True
        logger.debug("rank-deficient design (rank %d of %d); ridge lambda=%.3g", rank, q, lam)

    return LeastSquaresFit(coef[:, 0] if was_vector else coef, ridge_used, rank)


def residualize(m: np.ndarray, basis: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Residual of ``m`` after least-squares projection on ``basis``; also returns the ridge flag."""
    fit = least_squares(basis, m)
    return np.asarray(m, dtype=float) - basis @ fit.coef, fit.ridge_used


def condition_number(a: np.ndarray) -> float:
    """2-norm condition number; +inf for singular or non-finite input."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        return float("inf")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[-1] == 0.0:
        return float("inf")
    return float(sv[0] / sv[-1])


def solve_square(
    a: np.ndarray,
    b: np.ndarray,
    *,
    cond_limit: float = COND_LIMIT,
) -> Tuple[np.ndarray, float]:
    """
    Solve the square system ``a x = b`` with column-pivoted QR.

    Raises:
        WeakIdentificationError: when the condition number of ``a`` exceeds ``cond_limit``
    """
    a = np.asarray(a, dtype=float)
    cond = condition_number(a)
    if not np.isfinite(cond) or cond > cond_limit:
        raise WeakIdentificationError(cond)
    b2, was_vector = _as_2d(b)
    qmat, r, perm = sla.qr(a, pivoting=True)
    x = np.empty((a.shape[1], b2.shape[1]))
    x[perm, :] = sla.solve_triangular(r, qmat.T @ b2)
    return (x[:, 0] if was_vector else x), cond


def solve_ridge_fallback(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Solve a symmetric square system, adding a small ridge when it is singular."""
    a = np.asarray(a, dtype=float)
    if numerical_rank(a) == a.shape[0]:
        return sla.solve(a, b), False
    lam = RIDGE_SCALE * max(np.trace(np.abs(a)) / max(a.shape[0], 1), 1.0)
    return sla.solve(a + lam * np.eye(a.shape[0]), b), True


def plugin_solve(upsilon: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """θ̂ = (Σ Υ̂ᵢTᵢ′)⁻¹ Σ Υ̂ᵢYᵢ, the just-identified plug-in solve."""
    theta, _ = solve_square(upsilon.T @ t, upsilon.T @ y)
    return theta


def psd_pinv(a: np.ndarray, cutoff: float) -> Tuple[np.ndarray, int]:
    """
    Pseudoinverse of a symmetric matrix keeping eigenvalues above ``cutoff``.

    Non-positive and tiny eigen-directions are dropped, which is how a variance
    difference that is not PSD gets handled.

    Returns:
        (pinv, rank) where rank counts the retained eigenvalues
    """
    a = np.asarray(a, dtype=float)
    sym = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(sym)
    keep = vals > cutoff
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return inv, int(np.sum(keep))
