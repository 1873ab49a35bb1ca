"""Covariance kernels, Gram matrices and their hyperparameter derivatives.

Five families are supported, for inputs ``u, v`` in R^p:

``SE``      ``eta0 * exp(-0.5 * sum_l eta_l (u_l - v_l)^2)``; params ``(eta0, eta_1..eta_p)``
``LIN``     ``sum_l eta_{l-1} u_l v_l``; params ``(eta_0..eta_{p-1})``
``VM``      ``eta0 * exp(eta1 * (sum_l cos(u_l - v_l) - p))``; params ``(eta0, eta1)``
``RQ``      ``(1 + (20^(1/lam) - 1) * sum_l eta_l (u_l - v_l)^2)^(-lam)``; params ``(lam, eta_1..eta_p)``
``MATERN``  ``(eta1 d)^a K_a(eta1 d) / (Gamma(a) 2^(a-1))`` with ``d = |u - v|`` and a
            fixed order ``a``; params ``(eta1,)``

A :class:`KernelConfig` is a sum of such terms.  Derivatives are taken with
respect to the natural (not log) hyperparameters, in the order the terms and
their parameters are listed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, kve

__all__ = [
    "FAMILIES",
    "KernelTerm",
    "KernelConfig",
    "kernel_eval",
    "kernel_grad",
    "gram",
    "gram_grad",
    "se",
    "lin",
    "vm",
    "rq",
    "matern",
]

FAMILIES = ("SE", "LIN", "VM", "RQ", "MATERN")
BOUNDED = {"SE": True, "LIN": False, "VM": True, "RQ": True, "MATERN": True}
# families whose value is linear in an amplitude parameter (all of them, for LIN)
AMPLITUDE = {"SE": (0,), "VM": (0,)}

LOG20 = np.log(20.0)


def n_params(family, p):
    return {"SE": p + 1, "LIN": p, "VM": 2, "RQ": p + 1, "MATERN": 1}[family]


def param_names(family, p):
    if family == "SE":
        return ["eta0"] + [f"eta{l}" for l in range(1, p + 1)]
    if family == "LIN":
        return [f"xi{l}" for l in range(p)]
    if family == "VM":
        return ["eta0", "eta1"]
    if family == "RQ":
        return ["lambda"] + [f"eta{l}" for l in range(1, p + 1)]
    return ["eta1"]


@dataclass(frozen=True)
class KernelTerm:
    family: str
    params: tuple
    order: float = 1.5

    def __post_init__(self):
        fam = str(self.family).upper()
        if fam not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        params = tuple(float(v) for v in np.atleast_1d(self.params))
        if not all(np.isfinite(v) and v > 0 for v in params):
            raise ValueError(f"{fam} hyperparameters must be positive: {params}")
        if not self.order > 0:
            raise ValueError("Matern order must be positive")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "order", float(self.order))


def se(eta0, *eta):
    return KernelTerm("SE", (eta0, *eta))


def lin(*xi):
    return KernelTerm("LIN", xi)


def vm(eta0, eta1):
    return KernelTerm("VM", (eta0, eta1))


def rq(lam, *eta):
    return KernelTerm("RQ", (lam, *eta))


def matern(eta1, order=1.5):
    return KernelTerm("MATERN", (eta1,), order)


@dataclass(frozen=True)
class KernelConfig:
    """A sum of kernel terms over inputs of dimension ``input_dim``."""

    terms: tuple
    input_dim: int = 1
    _slices: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a kernel needs at least one term")
        p = int(self.input_dim)
        if p < 1:
            raise ValueError("input_dim must be >= 1")
        slices, start = [], 0
        for t in terms:
            if not isinstance(t, KernelTerm):
                raise TypeError("terms must be KernelTerm instances")
            k = n_params(t.family, p)
            if len(t.params) != k:
                raise ValueError(
                    f"{t.family} with p={p} takes {k} parameters, got {len(t.params)}"
                )
            slices.append(slice(start, start + k))
            start += k
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "input_dim", p)
        object.__setattr__(self, "_slices", tuple(slices))

    @property
    def n_params(self):
        return self._slices[-1].stop

    @property
    def theta(self):
        return np.array([v for t in self.terms for v in t.params])

    @property
    def param_names(self):
        names = []
        for i, t in enumerate(self.terms):
            names += [f"{t.family.lower()}{i}.{s}" for s in param_names(t.family, self.input_dim)]
        return names

    @property
    def bounded(self):
        return all(BOUNDED[t.family] for t in self.terms)

    @property
    def amplitude_homogeneous(self):
        """True when scaling every amplitude by c scales the kernel by c."""
        return all(t.family in ("SE", "LIN", "VM") for t in self.terms)

    def amplitude_mask(self):
        mask = np.zeros(self.n_params, dtype=bool)
        for t, sl in zip(self.terms, self._slices):
            if t.family == "LIN":
                mask[sl] = True
            elif t.family in AMPLITUDE:
                mask[sl.start + AMPLITUDE[t.family][0]] = True
        return mask

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} hyperparameters, got {theta.shape}")
        terms = tuple(
            KernelTerm(t.family, tuple(theta[sl]), t.order)
            for t, sl in zip(self.terms, self._slices)
        )
        return KernelConfig(terms, self.input_dim)

    # evaluation -----------------------------------------------------------
    def _as_points(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.input_dim) if self.input_dim > 1 else X[:, None]
        if X.shape[1] != self.input_dim:
            raise ValueError(f"inputs have dimension {X.shape[1]}, expected {self.input_dim}")
        return X

    def _parts(self, X1, X2, order, diagonal=False):
        X1 = self._as_points(X1)
        if diagonal:
            diff = np.zeros((X1.shape[0], 1, X1.shape[1]))
            prod = (X1 * X1)[:, None, :]
        else:
            X2 = self._as_points(X2)
            diff = X1[:, None, :] - X2[None, :, :]
            prod = X1[:, None, :] * X2[None, :, :]
        K = np.zeros(diff.shape[:2])
        P = self.n_params
        dK = np.zeros((P,) + K.shape) if order >= 1 else None
        d2K = np.zeros((P, P) + K.shape) if order >= 2 else None
        for t, sl in zip(self.terms, self._slices):
            k, dk, d2k = _TERM_FUNCS[t.family](np.array(t.params), diff, prod, order, t.order)
            K += k
            if order >= 1:
                dK[sl] = dk
            if order >= 2:
                d2K[sl, sl] = d2k
        return K, dK, d2K

    def __call__(self, X1, X2=None):
        return self.gram(X1, X2)

    def gram(self, X1, X2=None):
        """Kernel matrix; exactly symmetric when ``X2`` is omitted."""
        if X2 is None:
            K = self._parts(X1, X1, 0)[0]
            return _mirror(K)
        return self._parts(X1, X2, 0)[0]

    def diag(self, X):
        """``k(x, x)`` for every row of ``X``."""
        return self._parts(X, None, 0, diagonal=True)[0][:, 0]

    def gram_grad(self, X, param_index=None):
        """Derivatives of the Gram matrix, shape ``(P, n, n)`` (or one slice)."""
        _, dK, _ = self._parts(X, X, 1)
        dK = _mirror(dK)
        return dK if param_index is None else dK[param_index]

    def gram_with_grad(self, X):
        K, dK, _ = self._parts(X, X, 1)
        return _mirror(K), _mirror(dK)

    def gram_with_hess(self, X):
        K, dK, d2K = self._parts(X, X, 2)
        return _mirror(K), _mirror(dK), _mirror(d2K)

    def eval(self, u, v):
        return float(self._parts(np.atleast_1d(u)[None], np.atleast_1d(v)[None], 0)[0][0, 0])

    def grad(self, u, v):
        _, dK, _ = self._parts(np.atleast_1d(u)[None], np.atleast_1d(v)[None], 1)
        return dK[:, 0, 0].copy()

    def hess(self, u, v):
        _, _, d2K = self._parts(np.atleast_1d(u)[None], np.atleast_1d(v)[None], 2)
        return d2K[:, :, 0, 0].copy()


def _mirror(A):
    """Copy the upper triangle of the trailing two axes onto the lower one."""
    n = A.shape[-1]
    iu = np.triu_indices(n, 1)
    out = A.copy()
    out[..., iu[1], iu[0]] = A[..., iu[0], iu[1]]
    return out


# --- per-family values and natural-scale derivatives -------------------------
# Each function returns (k, dk, d2k) with shapes (n1, n2), (P, n1, n2),
# (P, P, n1, n2); derivative arrays are None when not requested.


def _se(th, diff, prod, order, _):
    eta0, eta = th[0], th[1:]
    sq = diff**2
    E = np.exp(-0.5 * sq @ eta)
    k = eta0 * E
    if order == 0:
        return k, None, None
    p = eta.size
    dk = np.empty((p + 1,) + k.shape)
    dk[0] = E
    dk[1:] = -0.5 * np.moveaxis(sq, -1, 0) * k
    if order == 1:
        return k, dk, None
    d2k = np.zeros((p + 1, p + 1) + k.shape)
    half = -0.5 * np.moveaxis(sq, -1, 0)
    d2k[0, 1:] = half * E
    d2k[1:, 0] = half * E
    d2k[1:, 1:] = half[:, None] * half[None, :] * k
    return k, dk, d2k


def _lin(th, diff, prod, order, _):
    k = prod @ th
    if order == 0:
        return k, None, None
    dk = np.moveaxis(prod, -1, 0).copy()
    if order == 1:
        return k, dk, None
    return k, dk, np.zeros((th.size, th.size) + k.shape)


def _vm(th, diff, prod, order, _):
    eta0, eta1 = th
    p = diff.shape[-1]
    C = np.cos(diff).sum(axis=-1) - p
    E = np.exp(eta1 * C)
    k = eta0 * E
    if order == 0:
        return k, None, None
    dk = np.stack([E, C * k])
    if order == 1:
        return k, dk, None
    d2k = np.stack([np.stack([np.zeros_like(k), C * E]), np.stack([C * E, C * C * k])])
    return k, dk, d2k


def _rq(th, diff, prod, order, _):
    lam, eta = th[0], th[1:]
    sq = diff**2
    D = sq @ eta
    e = np.exp(LOG20 / lam)
    c = np.expm1(LOG20 / lam)
    B = 1.0 + c * D
    logB = np.log1p(c * D)
    k = np.exp(-lam * logB)
    if order == 0:
        return k, None, None
    c1 = -LOG20 / lam**2 * e
    sqm = np.moveaxis(sq, -1, 0)
    g = np.empty((eta.size + 1,) + k.shape)
    g[0] = -logB - lam * c1 * D / B
    g[1:] = -lam * c * sqm / B
    dk = g * k
    if order == 1:
        return k, dk, None
    c2 = (2.0 * LOG20 / lam**3 + LOG20**2 / lam**4) * e
    h = np.empty((eta.size + 1, eta.size + 1) + k.shape)
    h[0, 0] = -2.0 * c1 * D / B - lam * c2 * D / B + lam * c1**2 * D**2 / B**2
    cross = -c * sqm / B - lam * c1 * sqm / B + lam * c * c1 * sqm * D / B**2
    h[0, 1:] = cross
    h[1:, 0] = cross
    h[1:, 1:] = lam * c**2 * sqm[:, None] * sqm[None, :] / B**2
    d2k = k * (g[:, None] * g[None, :] + h)
    return k, dk, d2k


def _matern(th, diff, prod, order, alpha):
    (eta,) = th
    d = np.sqrt(np.sum(diff**2, axis=-1))
    x = eta * d
    pos = x > 0
    if alpha == 1.5:
        ex = np.exp(-x)
        k = (1.0 + x) * ex
        if order == 0:
            return k, None, None
        dk = (-eta * d**2 * ex)[None]
        if order == 1:
            return k, dk, None
        d2k = ((eta * d - 1.0) * d**2 * ex)[None, None]
        return k, dk, d2k
    logc = -gammaln(alpha) - (alpha - 1.0) * np.log(2.0)
    xs = np.where(pos, x, 1.0)
    lx = np.log(xs)

    def xk(power, nu):
        # x^power K_nu(x) evaluated in log space to avoid overflow/underflow
        return np.exp(logc + power * lx - xs + np.log(kve(abs(nu), xs)))

    k = np.where(pos, xk(alpha, alpha), 1.0)
    if order == 0:
        return k, None, None
    dk = np.where(pos, -d * xk(alpha, alpha - 1.0), 0.0)[None]
    if order == 1:
        return k, dk, None
    d2k = np.where(pos, -d**2 * (xk(alpha - 1.0, alpha - 1.0) - xk(alpha, alpha - 2.0)), 0.0)
    return k, dk, d2k[None, None]


_TERM_FUNCS = {"SE": _se, "LIN": _lin, "VM": _vm, "RQ": _rq, "MATERN": _matern}


# --- functional surface -------------------------------------------------------


def kernel_eval(cfg, u, v):
    return cfg.eval(u, v)


def kernel_grad(cfg, u, v):
    return cfg.grad(u, v)


def gram(cfg, X):
    return cfg.gram(X)


def gram_grad(cfg, X, param_index):
    return cfg.gram_grad(X, param_index)
