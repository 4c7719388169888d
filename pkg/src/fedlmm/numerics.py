"""Dense linear-algebra helpers shared by the rest of the package.

Symmetric and rectangular matrices are plain ``float64`` numpy arrays.  The
Cholesky factorisation runs through :mod:`fedlmm.kernels` so that rank
deficiency is detected with a fixed relative pivot threshold; the eigen and
SVD routines delegate to LAPACK.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .errors import NotDiagonalizableNumerically, NotPositiveDefinite

PIVOT_RTOL = 1e-12
EIGEN_CLAMP_RTOL = 1e-10


class EigenPair(NamedTuple):
    vectors: np.ndarray
    values: np.ndarray


class SvdResult(NamedTuple):
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray


def _as_square(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    return a


def inf_norm(m) -> float:
    """Maximum absolute row sum."""
    a = np.asarray(m, dtype=float)
    return float(np.max(np.abs(a).sum(axis=1))) if a.size else 0.0


def cholesky_lower(m) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises :class:`NotPositiveDefinite` when a pivot falls at or below
    ``1e-12 * max(diag(m))``.  Callers generating pseudo-data catch this and
    switch to the eigen path.
    """
    a = _as_square(m)
    lower, failed = kernels.cholesky_lower(np.ascontiguousarray(a), PIVOT_RTOL)
    if failed >= 0:
        raise NotPositiveDefinite(f"pivot {failed} is not positive (matrix of order {a.shape[0]})")
    return lower


def sym_eigen(m) -> EigenPair:
    """Eigendecomposition with eigenvalues sorted in nonincreasing order.

    Eigenvalues within ``1e-10 * ||m||_inf`` of zero are set to zero (the
    window is symmetric so rank-deficient inputs come back with exact zeros);
    anything more negative raises :class:`NotPositiveDefinite`, since the callers use
    this for covariance matrices only.
    """
    a = _as_square(m)
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NotDiagonalizableNumerically(str(exc)) from exc
    order = np.argsort(values, kind="stable")[::-1]
    values = values[order]
    vectors = vectors[:, order]
    tol = EIGEN_CLAMP_RTOL * inf_norm(a)
    if values.size and values[-1] < -tol:
        raise NotPositiveDefinite(
            f"eigenvalue {values[-1]:.3e} below the clamping window (-{tol:.3e})"
        )
    values = np.where(values <= tol, 0.0, values)
    return EigenPair(vectors=vectors, values=values)


def full_svd(m) -> SvdResult:
    """Full (not thin) SVD: ``left`` is n x n and ``right`` is p x p.

    ``right`` holds the right singular vectors as columns, so that
    ``m = left[:, :k] @ diag(s) @ right[:, :k].T`` with ``k = min(n, p)``.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NotDiagonalizableNumerically(str(exc)) from exc
    return SvdResult(left=u, singular_values=s, right=vt.T)


def solve_spd(m, rhs) -> np.ndarray:
    """Solve ``m @ x = rhs`` for symmetric positive definite ``m``."""
    lower = cholesky_lower(m)
    b = np.asarray(rhs, dtype=float)
    y = solve_triangular(lower, b, lower=True, check_finite=False)
    return solve_triangular(lower.T, y, lower=False, check_finite=False)


def inv_spd(m) -> np.ndarray:
    a = _as_square(m)
    out = solve_spd(a, np.eye(a.shape[0]))
    return 0.5 * (out + out.T)


def logdet_spd(m) -> float:
    """``log|m|`` as twice the sum of the log Cholesky diagonal."""
    lower = cholesky_lower(m)
    return float(2.0 * np.log(np.diag(lower)).sum())


def symmetrize(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    return 0.5 * (a + a.T)
