"""Predictive means, variances and intervals for fitted models.

Given curve ``i`` and a query input ``u`` the predictive law of ``f_i(u)`` is
EMTD with shape ``nu* = n/2 + nu`` and scale ``omega* = nu* - 1``, location
``k_u^T Sigma^{-1} y`` and variance ``s0 (k(u, u) - k_u^T Sigma^{-1} k_u)``.
A scalar EMTD variate standardises to Student-t with ``2 nu*`` degrees of
freedom after dividing by ``sqrt(var * omega* / nu*)``; GPR intervals are
normal.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from ._linalg import chol_inverse
from .errors import NumericalError, UnknownCurve

__all__ = [
    "Prediction",
    "predict_f",
    "predict_y",
    "blup_training",
    "posterior_process",
    "interval_halfwidth",
]

CLAMP = 1e-10


@dataclass(frozen=True)
class Prediction:
    """Predictions for one curve at the rows of ``U``.

    Per-point fields are arrays of length ``q``; ``s0`` and ``dof`` are
    shared by every point of the curve.  ``dof`` is ``inf`` for GPR.
    ``lower``/``upper`` bound the interval for ``f`` (``kind == "f"``) or for
    a new observation ``y`` (``kind == "y"``).
    """

    U: np.ndarray
    mean: np.ndarray
    f_variance: np.ndarray
    y_variance: np.ndarray
    s0: float
    dof: float
    level: float
    lower: np.ndarray
    upper: np.ndarray
    kind: str = "f"

    def __len__(self):
        return self.mean.shape[0]

    def records(self):
        """One dict per query point."""
        return [
            {
                "u": self.U[j].tolist(),
                "mean": float(self.mean[j]),
                "f_variance": float(self.f_variance[j]),
                "y_variance": float(self.y_variance[j]),
                "s0": self.s0,
                "dof": self.dof,
                "lower": float(self.lower[j]),
                "upper": float(self.upper[j]),
            }
            for j in range(len(self))
        ]


def interval_halfwidth(variance, n, nu, level):
    """Half-width of the central ``level`` interval of the predictive law.

    ``nu = inf`` gives the normal interval.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    p = 0.5 * (1.0 + level)
    variance = np.asarray(variance, dtype=float)
    if nu == math.inf:
        return stats.norm.ppf(p) * np.sqrt(variance)
    nus = 0.5 * n + nu
    return stats.t.ppf(p, 2.0 * nus) * np.sqrt(variance * (nus - 1.0) / nus)


def _curve(model, curve):
    m = model.data.m
    if not (isinstance(curve, (int, np.integer)) and 0 <= curve < m):
        raise UnknownCurve(f"curve index {curve!r} is not among the {m} fitted curves")
    return model.data.curves[curve], model.caches[curve], model.params.kernel(curve)


def _points(U, p):
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U.reshape(-1, 1) if p == 1 else U.reshape(1, -1)
    if U.ndim != 2 or U.shape[1] != p:
        raise ValueError(f"query points must have {p} columns")
    return U


def _clamp(v):
    if v.size and np.min(v) < -CLAMP:
        raise NumericalError(f"negative predictive variance {np.min(v):.3g}")
    return np.maximum(v, 0.0)


def _predict(model, curve, U, level, kind):
    data, cache, kernel = _curve(model, curve)
    U = _points(U, data.X.shape[1])
    phi = model.params.phi
    nu = model.params.nu
    s0 = cache.s0
    if U.shape[0] == 0:
        empty = np.zeros(0)
        return Prediction(U, empty, empty, empty, s0, _dof(cache.n, nu), level, empty, empty, kind)
    Ku = kernel.gram(data.X, U)
    mean = Ku.T @ cache.alpha
    w = solve_triangular(cache.sigma_chol, Ku, lower=True, check_finite=False)
    fvar = _clamp(s0 * (kernel.diag(U) - np.sum(w * w, axis=0)))
    yvar = fvar + s0 * phi
    half = interval_halfwidth(fvar if kind == "f" else yvar, cache.n, nu, level)
    return Prediction(U, mean, fvar, yvar, s0, _dof(cache.n, nu), level, mean - half, mean + half, kind)


def _dof(n, nu):
    return math.inf if nu == math.inf else n + 2.0 * nu


def predict_f(model, curve, U, level=0.95):
    """Predictive law of the latent function ``f_i`` at the rows of ``U``.

    Parameters
    ----------
    model : FittedModel
    curve : int
        Index of a fitted curve.
    U : array_like, shape (q, p)
    level : float
        Central interval probability.

    Returns
    -------
    Prediction
    """
    return _predict(model, curve, U, level, "f")


def predict_y(model, curve, U, level=0.95):
    """Like :func:`predict_f` but intervals are for a new noisy observation."""
    return _predict(model, curve, U, level, "y")


def blup_training(model, curve):
    """BLUP of ``f_i`` at the training inputs and its posterior covariance.

    Returns ``(K Sigma^{-1} y, s0 phi K Sigma^{-1})``, evaluated as
    ``y - phi alpha`` and ``s0 phi (I - phi Sigma^{-1})``.
    """
    data, cache, _ = _curve(model, curve)
    phi = model.params.phi
    mu = data.y - phi * cache.alpha
    C = cache.s0 * phi * (np.eye(cache.n) - phi * chol_inverse(cache.sigma_chol))
    return mu, 0.5 * (C + C.T)


def posterior_process(model, curve, U, V=None):
    """Posterior covariance ``s0 (k(u, v) - k_u^T Sigma^{-1} k_v)`` on ``U x V``."""
    data, cache, kernel = _curve(model, curve)
    p = data.X.shape[1]
    U = _points(U, p)
    V = U if V is None else _points(V, p)
    wu = solve_triangular(cache.sigma_chol, kernel.gram(data.X, U), lower=True, check_finite=False)
    wv = solve_triangular(cache.sigma_chol, kernel.gram(data.X, V), lower=True, check_finite=False)
    return cache.s0 * (kernel.gram(U, V) - wu.T @ wv)
