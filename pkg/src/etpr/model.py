"""Marginal likelihood of the eTPR model, its scores and second derivatives.

Each curve ``i`` contributes ``y_i ~ EMTD(nu, nu - 1, 0, Sigma_i)`` with
``Sigma_i = K_i + phi I``.  The GPR model is the ``nu = inf`` member, in which
the two reweighting factors ``s1`` and ``s0`` are identically one.

The parameter vector ``beta`` is ``(phi, theta)`` when the kernel
hyperparameters are shared by all curves and ``(phi, theta_1, ..., theta_m)``
otherwise.  Derivatives are reported on the natural scale unless
``log_scale=True`` is passed.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, polygamma

from ._linalg import chol_inverse, chol_logdet, chol_solve, jittered_cholesky
from .emtd import LOG_2PI, log_density_from_parts
from .errors import DimensionError, NuOutOfDomain, SingularScale

__all__ = [
    "Curve",
    "Dataset",
    "ModelParams",
    "CurveCache",
    "NU_MIN",
    "curve_cache",
    "log_marginal_likelihood",
    "score_beta",
    "score_nu",
    "hessian_beta",
    "bounded_influence_probe",
]

NU_MIN = 1.0 + 1e-6


@dataclass(frozen=True)
class Curve:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if y.shape[0] < 1:
            raise DimensionError("a curve needs at least one observation")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.y.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A collection of ``m`` curves sharing the input dimension ``p``."""

    curves: tuple

    def __post_init__(self):
        curves = tuple(c if isinstance(c, Curve) else Curve(*c) for c in self.curves)
        if not curves:
            raise DimensionError("a dataset needs at least one curve")
        p = {c.X.shape[1] for c in curves}
        if len(p) != 1:
            raise DimensionError(f"curves disagree on input dimension: {sorted(p)}")
        object.__setattr__(self, "curves", curves)

    @classmethod
    def single(cls, X, y):
        return cls((Curve(X, y),))

    @property
    def m(self):
        return len(self.curves)

    @property
    def p(self):
        return self.curves[0].X.shape[1]

    @property
    def sizes(self):
        return [c.n for c in self.curves]

    def with_y(self, curve, y):
        curves = list(self.curves)
        curves[curve] = Curve(curves[curve].X, y)
        return Dataset(tuple(curves))


@dataclass(frozen=True)
class ModelParams:
    """Noise scale, per-curve kernels and the shape ``nu``.

    ``nu = math.inf`` selects the GPR model.  ``omega`` is always ``nu - 1``.
    When ``tied`` is true every curve uses ``kernels[0]``.
    """

    phi: float
    kernels: tuple
    nu: float = 1.05
    tied: bool = True

    def __post_init__(self):
        phi = float(self.phi)
        if not (phi > 0 and np.isfinite(phi)):
            raise ValueError(f"phi must be positive, got {phi}")
        kernels = tuple(self.kernels)
        if not kernels:
            raise ValueError("at least one kernel is required")
        nu = float(self.nu)
        if not (nu == math.inf or (np.isfinite(nu) and nu >= NU_MIN)):
            raise NuOutOfDomain(f"nu must exceed {NU_MIN} (or be inf), got {nu}")
        if self.tied:
            kernels = kernels[:1]
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "nu", nu)

    @property
    def gpr(self):
        return self.nu == math.inf

    @property
    def omega(self):
        return math.inf if self.gpr else self.nu - 1.0

    def kernel(self, i):
        return self.kernels[0] if self.tied else self.kernels[i]

    def check(self, data):
        if not self.tied and len(self.kernels) != data.m:
            raise DimensionError(f"{len(self.kernels)} kernels for {data.m} curves")
        if self.kernels[0].input_dim != data.p:
            raise DimensionError("kernel input_dim does not match the data")

    # flat parameter vector --------------------------------------------------
    @property
    def beta(self):
        return np.concatenate([[self.phi]] + [k.theta for k in self.kernels])

    def beta_names(self):
        names = ["phi"]
        for i, k in enumerate(self.kernels):
            prefix = "" if self.tied else f"curve{i}."
            names += [prefix + s for s in k.param_names]
        return names

    def with_beta(self, beta):
        beta = np.asarray(beta, dtype=float)
        out, start = [], 1
        for k in self.kernels:
            out.append(k.with_theta(beta[start : start + k.n_params]))
            start += k.n_params
        if start != beta.size:
            raise ValueError(f"beta has {beta.size} entries, expected {start}")
        return ModelParams(beta[0], tuple(out), self.nu, self.tied)

    def with_nu(self, nu):
        return ModelParams(self.phi, self.kernels, nu, self.tied)

    def beta_slices(self, i):
        """Indices of ``beta`` that curve ``i`` depends on: phi, then its theta."""
        P = self.kernels[0].n_params
        start = 1 if self.tied else 1 + i * P
        return np.concatenate([[0], np.arange(start, start + P)])


@dataclass
class CurveCache:
    sigma_chol: np.ndarray
    alpha: np.ndarray
    quad: float
    s1: float
    s0: float
    logdet: float
    n: int
    loglik: float


def _s_factors(n, nu, quad):
    if nu == math.inf:
        return 1.0, 1.0
    s1 = (n + 2.0 * nu) / (2.0 * (nu - 1.0) + quad)
    s0 = (quad + 2.0 * (nu - 1.0)) / (n + 2.0 * (nu - 1.0))
    return s1, s0


def _curve_loglik(n, nu, logdet, quad):
    if nu == math.inf:
        return -0.5 * (n * LOG_2PI + logdet + quad)
    return log_density_from_parts(n, nu, nu - 1.0, logdet, quad)


def curve_cache(X, y, kernel, phi, nu, curve=None, K=None):
    """Factorise ``Sigma = K + phi I`` for one curve and collect the scalars."""
    if K is None:
        K = kernel.gram(X)
    n = y.shape[0]
    L, _ = jittered_cholesky(K + phi * np.eye(n), curve=curve)
    alpha = chol_solve(L, y)
    quad = float(y @ alpha)
    logdet = chol_logdet(L)
    s1, s0 = _s_factors(n, nu, quad)
    return CurveCache(L, alpha, quad, s1, s0, logdet, n, _curve_loglik(n, nu, logdet, quad))


def _caches(data, params):
    params.check(data)
    out = []
    for i, c in enumerate(data.curves):
        try:
            out.append(curve_cache(c.X, c.y, params.kernel(i), params.phi, params.nu, curve=i))
        except SingularScale as exc:
            raise SingularScale(str(exc), curve=i, params=params.beta) from None
    return out


def log_marginal_likelihood(data, params):
    """Sum over curves of the log marginal density of ``y_i``."""
    return float(sum(c.loglik for c in _caches(data, params)))


def _to_log(beta, g, H=None):
    if H is None:
        return beta * g
    return beta[:, None] * H * beta[None, :] + np.diag(beta * g)


def _dsigma(kernel, X, order):
    """Gram matrix and derivatives of ``Sigma`` w.r.t. (phi, theta)."""
    n = X.shape[0]
    P = kernel.n_params
    if order == 1:
        K, dK = kernel.gram_with_grad(X)
        d2 = None
    else:
        K, dK, d2K = kernel.gram_with_hess(X)
        d2 = np.zeros((P + 1, P + 1, n, n))
        d2[1:, 1:] = d2K
    dS = np.empty((P + 1, n, n))
    dS[0] = np.eye(n)
    dS[1:] = dK
    return K, dS, d2


def loglik_and_score(data, params, with_nu=False):
    """Log-likelihood together with its natural-scale gradient in beta.

    With ``with_nu=True`` the derivative in ``nu`` is appended.
    """
    params.check(data)
    beta = params.beta
    grad = np.zeros(beta.size)
    gnu = 0.0
    ll = 0.0
    for i, c in enumerate(data.curves):
        kern = params.kernel(i)
        K, dS, _ = _dsigma(kern, c.X, 1)
        try:
            cc = curve_cache(c.X, c.y, kern, params.phi, params.nu, curve=i, K=K)
        except SingularScale as exc:
            raise SingularScale(str(exc), curve=i, params=beta) from None
        ll += cc.loglik
        Sinv = chol_inverse(cc.sigma_chol)
        W = cc.s1 * np.outer(cc.alpha, cc.alpha) - Sinv
        grad[params.beta_slices(i)] += 0.5 * np.einsum("ab,kab->k", W, dS)
        if with_nu:
            gnu += _nu_score_curve(cc.n, params.nu, cc.quad)
    if with_nu:
        return ll, grad, gnu
    return ll, grad


def score_beta(data, params, log_scale=False):
    """Score ``dl/dbeta``: ``0.5 * sum_i tr((s1 a a^T - Sigma^-1) dSigma/dbeta_k)``."""
    _, g = loglik_and_score(data, params)
    return _to_log(params.beta, g) if log_scale else g


def _nu_score_curve(n, nu, S):
    w = nu - 1.0
    return -0.5 * (
        n / w
        + 2.0 * np.log1p(S / (2.0 * w))
        - (n + 2.0 * nu) * S / (2.0 * w * w + w * S)
        - 2.0 * digamma(0.5 * n + nu)
        + 2.0 * digamma(nu)
    )


def _nu_hess_curve(n, nu, S):
    w = nu - 1.0
    t1 = n / (2.0 * w * w)
    t2 = S / (w * (2.0 * w + S))
    num, dnum = (n + 2.0 * nu) * S, 2.0 * S
    den, dden = 4.0 * w * w + 2.0 * w * S, 8.0 * w + 2.0 * S
    t3 = (dnum * den - num * dden) / den**2
    t4 = polygamma(1, 0.5 * n + nu) - polygamma(1, nu)
    return t1 + t2 + t3 + t4


def score_nu(data, params):
    """Derivative of the log-likelihood in ``nu`` (with ``omega = nu - 1``)."""
    if params.gpr or params.nu <= 1.0:
        raise NuOutOfDomain("the nu score needs a finite nu > 1")
    return float(sum(_nu_score_curve(c.n, params.nu, c.quad) for c in _caches(data, params)))


def hessian_beta(data, params, log_scale=False, with_nu=False):
    """Matrix of second derivatives of the log-likelihood in ``beta``.

    For curve ``i`` with ``A_k = Sigma^-1 dSigma_k`` and ``b_k = dSigma_k alpha``
    the ``(k, j)`` entry is::

        0.5 tr(A_j A_k) - 0.5 tr(Sigma^-1 dSigma_kj)
        + 0.5 s1^2 / (n + 2 nu) (alpha' b_k)(alpha' b_j)
        + 0.5 s1 alpha' dSigma_kj alpha - s1 b_j' Sigma^-1 b_k

    With ``with_nu=True`` (finite ``nu`` only) a final row and column for
    ``nu`` is added; it is always on the natural scale.
    """
    params.check(data)
    if with_nu and params.gpr:
        raise NuOutOfDomain("GPR mode has no nu derivative")
    beta = params.beta
    nb = beta.size
    H = np.zeros((nb + 1, nb + 1) if with_nu else (nb, nb))
    g = np.zeros(nb)
    for i, c in enumerate(data.curves):
        kern = params.kernel(i)
        K, dS, d2S = _dsigma(kern, c.X, 2)
        cc = curve_cache(c.X, c.y, kern, params.phi, params.nu, curve=i, K=K)
        n, a, s1 = cc.n, cc.alpha, cc.s1
        Sinv = chol_inverse(cc.sigma_chol)
        A = np.einsum("ab,kbc->kac", Sinv, dS)
        b = dS @ a
        ab = b @ a
        h = 0.5 * np.einsum("jab,kba->jk", A, A)
        h -= 0.5 * np.einsum("ab,kjba->kj", Sinv, d2S)
        h += 0.5 * s1 * np.einsum("a,kjab,b->kj", a, d2S, a)
        h -= s1 * (b @ Sinv @ b.T)
        if not params.gpr:
            h += 0.5 * s1**2 / (n + 2.0 * params.nu) * np.outer(ab, ab)
        idx = params.beta_slices(i)
        H[np.ix_(idx, idx)] += h
        g[idx] += 0.5 * (s1 * ab - np.einsum("kaa->k", A))
        if with_nu:
            S = cc.quad
            ds1 = 2.0 * (S - 2.0 - n) / (2.0 * params.nu - 2.0 + S) ** 2
            H[idx, nb] += 0.5 * ds1 * ab
            H[nb, idx] += 0.5 * ds1 * ab
            H[nb, nb] += _nu_hess_curve(n, params.nu, S)
    if log_scale:
        H[:nb, :nb] = _to_log(beta, g, H[:nb, :nb])
        if with_nu:
            H[:nb, nb] *= beta
            H[nb, :nb] *= beta
    return H


def bounded_influence_probe(data, params, curve, point, magnitudes):
    """Score norms when one response is replaced by increasingly large values.

    Returns a structured array with fields ``magnitude``, ``etpr`` and ``gpr``
    holding the Euclidean norm of the natural-scale score under the given
    ``nu`` and under the GPR model at the same ``beta``.
    """
    if params.gpr:
        raise NuOutOfDomain("the probe compares a finite nu against GPR")
    gpr = params.with_nu(math.inf)
    rows = []
    for mag in magnitudes:
        y = data.curves[curve].y.copy()
        y[point] = mag
        d = data.with_y(curve, y)
        rows.append(
            (
                float(mag),
                float(np.linalg.norm(score_beta(d, params))),
                float(np.linalg.norm(score_beta(d, gpr))),
            )
        )
    return np.array(rows, dtype=[("magnitude", float), ("etpr", float), ("gpr", float)])
