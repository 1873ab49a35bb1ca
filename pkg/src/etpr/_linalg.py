"""Cholesky helpers with a bounded diagonal-jitter policy."""

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import SingularScale

JITTER_START = 1e-10
JITTER_MAX = 1e-6


def jittered_cholesky(A, curve=None):
    """Lower Cholesky factor of a symmetric matrix, repairing it if needed.

    The plain factorisation is tried first.  On failure a jitter of
    ``1e-10 * trace(A) / n`` is added to the diagonal and grown tenfold up to
    ``1e-6 * trace(A) / n``; past that :class:`SingularScale` is raised.

    Returns
    -------
    L : ndarray
        Lower-triangular factor of ``A + jitter * I``.
    jitter : float
        The diagonal increment that was actually used.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if not np.all(np.isfinite(A)):
        raise SingularScale("scale matrix has non-finite entries", curve=curve)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(A) / n
    if not scale > 0:
        raise SingularScale("scale matrix has non-positive trace", curve=curve)
    level = JITTER_START
    while level <= JITTER_MAX * (1 + 1e-9):
        jitter = level * scale
        try:
            return np.linalg.cholesky(A + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            level *= 10.0
    raise SingularScale("scale matrix is not positive definite after jitter", curve=curve)


def chol_solve(L, b):
    return cho_solve((L, True), b, check_finite=False)


def chol_logdet(L):
    return 2.0 * np.sum(np.log(np.diag(L)))


def chol_quad(L, r):
    """``r^T A^{-1} r`` using the factor of ``A``."""
    w = solve_triangular(L, r, lower=True, check_finite=False)
    return float(w @ w)


def chol_inverse(L):
    n = L.shape[0]
    return cho_solve((L, True), np.eye(n), check_finite=False)
