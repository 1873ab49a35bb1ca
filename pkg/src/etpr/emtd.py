"""Extended multivariate t-distribution (EMTD).

``Z ~ EMTD(nu, omega, mu, Sigma)`` is the scale mixture

    Z | r ~ N(mu, r * Sigma),    r ~ IG(nu, omega),

with density

    p(z) = |2 pi omega Sigma|^{-1/2} Gamma(n/2 + nu) / Gamma(nu)
           * (1 + q / (2 omega))^{-(n/2 + nu)},   q = (z - mu)^T Sigma^{-1} (z - mu).

Everything here is evaluated in log space through a Cholesky factor of the
scale matrix.  The inverse gamma law uses the density
``g(r) = (omega / r)^(nu + 1) exp(-omega / r) / (omega Gamma(nu))``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr
from scipy.special import gammaln

from ._linalg import chol_logdet, chol_solve, jittered_cholesky
from .errors import DimensionError, RankError

__all__ = [
    "UNDEFINED",
    "EmtdParams",
    "IgParams",
    "emtd_log_density",
    "emtd_marginal",
    "emtd_conditional",
    "emtd_linear_map",
    "emtd_sample",
    "r_posterior",
    "ig_log_density",
    "make_rng",
]

LOG_2PI = np.log(2.0 * np.pi)


class _Undefined:
    """Marker for a moment that does not exist for the given shape."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


@dataclass(frozen=True)
class IgParams:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("inverse gamma shape and scale must be positive")

    @property
    def mean(self):
        if self.shape <= 1:
            return UNDEFINED
        return self.scale / (self.shape - 1.0)

    @property
    def variance(self):
        if self.shape <= 2:
            return UNDEFINED
        return self.scale**2 / ((self.shape - 1.0) ** 2 * (self.shape - 2.0))


@dataclass(frozen=True, eq=False)
class EmtdParams:
    """Parameters of an EMTD.

    Parameters
    ----------
    nu : float
        Shape of the mixing inverse gamma law, ``nu > 0``.
    omega : float
        Scale of the mixing inverse gamma law, ``omega > 0``.
    mean : array_like, shape (n,)
        Location vector.
    scale : array_like, shape (n, n)
        Symmetric positive definite scale matrix.
    """

    nu: float
    omega: float
    mean: np.ndarray
    scale: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nu = float(self.nu)
        omega = float(self.omega)
        if not (nu > 0 and omega > 0):
            raise ValueError(f"nu and omega must be positive, got {nu}, {omega}")
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float)).copy()
        n = mean.shape[0]
        if mean.ndim != 1 or scale.shape != (n, n):
            raise DimensionError(
                f"mean has length {n} but scale has shape {scale.shape}"
            )
        asym = np.max(np.abs(scale - scale.T)) if n > 1 else 0.0
        if asym > 1e-12 * max(np.max(np.abs(scale)), 1e-300):
            raise ValueError("scale matrix is not symmetric")
        mean.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        L, _ = jittered_cholesky(scale)
        L.flags.writeable = False
        object.__setattr__(self, "_chol", L)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def chol(self):
        return self._chol

    def quad(self, z):
        r = np.asarray(z, dtype=float) - self.mean
        return float(r @ chol_solve(self._chol, r))

    # moments --------------------------------------------------------------
    def expectation(self):
        """``E(Z) = mu``; exists for ``nu > 1/2``."""
        return self.mean.copy() if self.nu > 0.5 else UNDEFINED

    def covariance(self):
        """``Cov(Z) = omega * Sigma / (nu - 1)``; exists for ``nu > 1``."""
        if self.nu <= 1:
            return UNDEFINED
        return self.omega * self.scale / (self.nu - 1.0)

    def skewness(self):
        # third absolute moment of the mixture needs E(r^{3/2}) < inf
        if self.nu <= 1.5:
            return UNDEFINED
        return np.zeros(self.dim)

    def kurtosis(self):
        if self.nu <= 2:
            return UNDEFINED
        return 3.0 / (self.nu - 2.0) + 3.0

    def __eq__(self, other):
        if not isinstance(other, EmtdParams):
            return NotImplemented
        return (
            self.nu == other.nu
            and self.omega == other.omega
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.scale, other.scale)
        )

    __hash__ = None


def log_density_from_parts(n, nu, omega, logdet, q):
    """EMTD log density given the dimension, ``log|Sigma|`` and the quadratic form."""
    a = 0.5 * n + nu
    return float(
        -0.5 * (n * (LOG_2PI + np.log(omega)) + logdet)
        + gammaln(a)
        - gammaln(nu)
        - a * np.log1p(q / (2.0 * omega))
    )


def emtd_log_density(z, p):
    """Log density of ``EMTD(p.nu, p.omega, p.mean, p.scale)`` at ``z``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n = p.dim
    if z.shape != (n,):
        raise DimensionError(f"point has shape {z.shape}, expected ({n},)")
    return log_density_from_parts(n, p.nu, p.omega, chol_logdet(p.chol), p.quad(z))


def ig_log_density(r, ig):
    r = np.asarray(r, dtype=float)
    return (
        (ig.shape + 1.0) * np.log(ig.scale / r)
        - ig.scale / r
        - np.log(ig.scale)
        - gammaln(ig.shape)
    )


def _check_indices(indices, n):
    idx = np.atleast_1d(np.asarray(indices))
    if idx.size == 0:
        raise IndexError("index set is empty")
    if idx.dtype.kind not in "iu":
        raise IndexError("indices must be integers")
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexError(f"indices out of range for dimension {n}")
    if np.unique(idx).size != idx.size:
        raise IndexError("indices must be distinct")
    return idx


def emtd_marginal(p, indices):
    """Marginal law of the sub-vector ``Z[indices]``."""
    idx = _check_indices(indices, p.dim)
    return EmtdParams(p.nu, p.omega, p.mean[idx], p.scale[np.ix_(idx, idx)])


def emtd_conditional(p, observed_indices, z1):
    """Law of the unobserved components given ``Z[observed_indices] = z1``.

    The free components are returned in increasing index order.  The shape
    and scale become ``nu + n1/2`` and ``omega + n1/2``; the scale matrix is
    the Schur complement multiplied by ``(2 omega + a1) / (2 omega + n1)``.
    """
    obs = _check_indices(observed_indices, p.dim)
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    if z1.shape != obs.shape:
        raise DimensionError("z1 length must match the observed index set")
    free = np.setdiff1d(np.arange(p.dim), obs)
    if free.size == 0:
        raise IndexError("no free components left to condition")
    n1 = obs.size
    S11 = p.scale[np.ix_(obs, obs)]
    S12 = p.scale[np.ix_(obs, free)]
    S22 = p.scale[np.ix_(free, free)]
    L11, _ = jittered_cholesky(S11)
    r1 = z1 - p.mean[obs]
    w = chol_solve(L11, r1)
    a1 = float(r1 @ w)
    mu = S12.T @ w + p.mean[free]
    schur = S22 - S12.T @ chol_solve(L11, S12)
    schur = 0.5 * (schur + schur.T)
    factor = (2.0 * p.omega + a1) / (2.0 * p.omega + n1)
    return EmtdParams(p.nu + 0.5 * n1, p.omega + 0.5 * n1, mu, factor * schur)


def emtd_linear_map(p, A):
    """Law of ``A Z`` for a full-row-rank ``A`` of shape (l, n)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != p.dim:
        raise DimensionError(f"A has {A.shape[1]} columns, expected {p.dim}")
    l = A.shape[0]
    if l > p.dim:
        raise RankError("A has more rows than columns")
    _, R, _ = qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size < l or diag[0] == 0 or np.any(diag < 1e-10 * diag[0]):
        raise RankError("A is not of full row rank")
    cov = A @ p.scale @ A.T
    return EmtdParams(p.nu, p.omega, A @ p.mean, 0.5 * (cov + cov.T))


def make_rng(seed, *stream):
    """Philox generator keyed by ``seed`` and an optional stream path.

    Every distinct ``stream`` tuple (for example ``(replication, curve)``)
    yields an independent counter-based stream, so draws never depend on the
    order in which work is scheduled.
    """
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def emtd_sample(p, count, seed):
    """Draw ``count`` i.i.d. rows from ``p`` through the scale mixture.

    The mixing variables come from stream ``(seed, 0)`` and the Gaussian
    innovations from stream ``(seed, 1)``.
    """
    count = int(count)
    if count < 1:
        raise ValueError("count must be at least 1")
    g = make_rng(seed, 0).standard_gamma(p.nu, size=count)
    r = p.omega / g
    eps = make_rng(seed, 1).standard_normal((count, p.dim))
    return p.mean + np.sqrt(r)[:, None] * (eps @ p.chol.T)


def r_posterior(p, z):
    """Posterior of the mixing scale given one observation ``z``.

    Returns
    -------
    post : IgParams
        ``IG(nu + n/2, omega + q/2)``.
    mean : float
        ``(2 omega + q) / (n + 2 nu - 2)``.
    variance : float or UNDEFINED
        Undefined when ``n/2 + nu <= 2``.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (p.dim,):
        raise DimensionError(f"point has shape {z.shape}, expected ({p.dim},)")
    n = p.dim
    q = p.quad(z)
    post = IgParams(0.5 * n + p.nu, p.omega + 0.5 * q)
    denom = n + 2.0 * p.nu - 2.0
    mean = (2.0 * p.omega + q) / denom if denom > 0 else UNDEFINED
    if 0.5 * n + p.nu > 2:
        variance = (2.0 * p.omega + q) ** 2 / (denom**2 * (0.5 * n + p.nu - 2.0))
    else:
        variance = UNDEFINED
    return post, mean, variance
