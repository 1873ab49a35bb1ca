"""Maximum likelihood fitting of eTPR and GPR models.

All positive parameters are optimised on the log scale; an estimated ``nu``
is optimised as ``log(nu - 1 - 1e-6)``.  Each start runs L-BFGS-B on the
analytic gradient and is then polished with safeguarded Newton steps on the
analytic Hessian, so that the tight default gradient tolerance is reachable.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from ._linalg import jittered_cholesky
from .emtd import make_rng
from .errors import EtprError, HessianNotPD, InvalidOptions, SingularScale
from .model import (
    NU_MIN,
    ModelParams,
    _caches,
    hessian_beta,
    loglik_and_score,
)

__all__ = ["FitOptions", "FittedModel", "fit", "profile_nu", "standard_errors"]

log = logging.getLogger(__name__)

MODES = ("etpr", "gpr")
PARAM_BOUNDS = (1e-8, 1e6)
NU_BOUNDS = (NU_MIN + 1e-6, 1e3)
RATIO_BOUNDS = (1e-8, 1e8)
# relative round-off floor of the log-likelihood
LL_NOISE = 1e-12


@dataclass(frozen=True)
class FitOptions:
    """Settings for :func:`fit`.

    ``nu`` is either a fixed value above one or the string ``"estimate"``,
    which is only allowed when there is more than one curve.  In ``"gpr"``
    mode ``nu`` is ignored.
    """

    mode: str = "etpr"
    nu: object = 1.05
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    restarts: int = 5
    seed: int = 0
    tied: bool = True
    phi0: float = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidOptions(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.nu != "estimate":
            try:
                nu = float(self.nu)
            except (TypeError, ValueError):
                raise InvalidOptions(f"nu must be a number or 'estimate', got {self.nu!r}") from None
            if not nu > 1.0:
                raise InvalidOptions(f"a fixed nu must exceed 1, got {nu}")
            object.__setattr__(self, "nu", nu)
        if self.restarts < 1:
            raise InvalidOptions("restarts must be at least 1")
        if self.max_iterations < 1:
            raise InvalidOptions("max_iterations must be at least 1")

    @property
    def estimate_nu(self):
        return self.mode == "etpr" and self.nu == "estimate"


@dataclass(frozen=True)
class FittedModel:
    data: object
    params: ModelParams
    caches: tuple
    log_likelihood: float
    converged: bool
    final_gradient_norm: float
    std_errors: object
    options: FitOptions
    nu_std_error: object = None
    iterations: int = 0
    history: tuple = field(default=(), repr=False)
    restart_log_likelihoods: tuple = ()

    @property
    def nu(self):
        return self.params.nu

    @property
    def gpr(self):
        return self.params.gpr

    def summary(self):
        """Plain-dict summary with natural-scale parameters."""
        p = self.params
        return {
            "mode": "gpr" if p.gpr else "etpr",
            "nu": "inf" if p.gpr else p.nu,
            "nu_policy": "estimate" if self.options.estimate_nu else "fixed",
            "beta_names": p.beta_names(),
            "beta": p.beta.tolist(),
            "std_errors": None if self.std_errors is None else list(map(float, self.std_errors)),
            "nu_std_error": self.nu_std_error,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "final_gradient_norm": self.final_gradient_norm,
            "iterations": self.iterations,
        }


def rebuild(data, params, **kw):
    """A :class:`FittedModel` at given parameters (no optimisation)."""
    caches = tuple(_caches(data, params))
    kw.setdefault("log_likelihood", float(sum(c.loglik for c in caches)))
    kw.setdefault("converged", True)
    kw.setdefault("final_gradient_norm", float("nan"))
    kw.setdefault("std_errors", None)
    kw.setdefault("options", FitOptions(mode="gpr" if params.gpr else "etpr"))
    return FittedModel(data=data, params=params, caches=caches, **kw)


class _Problem:
    """Objective in the unconstrained log coordinates ``z``.

    When ``profile`` is set the kernel is amplitude homogeneous and the
    common amplitude scale ``c`` (multiplying phi and every amplitude) has a
    closed-form maximiser.  ``z`` then holds the log amplitudes relative to
    phi plus the remaining log parameters, and the objective is the profile
    likelihood.  By the envelope property its gradient is the full log-scale
    gradient with the scale direction dropped.
    """

    def __init__(self, data, template, estimate_nu, profile=False):
        self.data = data
        self.template = template
        self.estimate_nu = estimate_nu
        self.profile = profile
        self.nb = template.beta.size
        m_theta = len(template.kernels)
        self.amp = np.concatenate(
            [[True]] + [template.kernels[0].amplitude_mask()] * m_theta
        )
        lo, hi = np.log(PARAM_BOUNDS)
        bounds = [(lo, hi)] * self.nb
        if profile:
            rlo, rhi = np.log(RATIO_BOUNDS)
            bounds = [(rlo, rhi) if a else (lo, hi) for a in self.amp[1:]]
        if estimate_nu:
            bounds.append((np.log(NU_BOUNDS[0] - NU_MIN), np.log(NU_BOUNDS[1] - NU_MIN)))
        self.bounds = np.array(bounds)

    def to_z(self, beta, nu=None):
        zb = np.log(beta)
        if self.profile:
            zb = zb[1:] - np.where(self.amp[1:], zb[0], 0.0)
        if self.estimate_nu:
            zb = np.append(zb, np.log(nu - NU_MIN))
        return np.clip(zb, self.bounds[:, 0], self.bounds[:, 1])

    def _scale(self, b):
        """Closed-form maximiser of the likelihood along ``b * c`` on amplitudes."""
        caches = _caches(self.data, self.template.with_beta(b))
        S = sum(c.quad for c in caches)
        n = sum(c.n for c in caches)
        if not S > 0:
            raise EtprError("zero response vector: amplitude scale is not identifiable")
        if self.template.gpr:
            return S / n
        nu = self.template.nu
        return S * nu / ((nu - 1.0) * n)

    def params(self, z):
        if self.profile:
            b = np.concatenate([[1.0], np.exp(z)])
            b[self.amp] *= self._scale(b)
            return self.template.with_beta(b)
        p = self.template.with_beta(np.exp(z[: self.nb]))
        if self.estimate_nu:
            p = p.with_nu(NU_MIN + np.exp(z[self.nb]))
        return p

    def _full_value_grad(self, p):
        if self.estimate_nu:
            ll, g, gnu = loglik_and_score(self.data, p, with_nu=True)
            return ll, np.append(p.beta * g, (p.nu - NU_MIN) * gnu)
        ll, g = loglik_and_score(self.data, p)
        return ll, p.beta * g

    def value_grad(self, z):
        ll, gw = self._full_value_grad(self.params(z))
        return ll, (gw[1:] if self.profile else gw)

    def full_gradient(self, z):
        """Log-scale gradient in all of ``beta`` (and ``nu``) at ``z``."""
        return self._full_value_grad(self.params(z))[1]

    def hessian(self, z):
        p = self.params(z)
        if self.profile:
            H = hessian_beta(self.data, p, log_scale=True)
            a = self.amp.astype(float)
            hzu = H[1:] @ a
            return H[1:, 1:] - np.outer(hzu, hzu) / (a @ H @ a)
        if not self.estimate_nu:
            return hessian_beta(self.data, p, log_scale=True)
        H = hessian_beta(self.data, p, log_scale=True, with_nu=True)
        _, _, gnu = loglik_and_score(self.data, p, with_nu=True)
        t = p.nu - NU_MIN
        H[: self.nb, self.nb] *= t
        H[self.nb, : self.nb] *= t
        H[self.nb, self.nb] = t * t * H[self.nb, self.nb] + t * gnu
        return H

    def projected(self, z, g):
        """Ascent gradient with components pushing against an active bound removed."""
        g = g.copy()
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        g[(z <= lo + 1e-12) & (g < 0)] = 0.0
        g[(z >= hi - 1e-12) & (g > 0)] = 0.0
        return g


def _newton_polish(prob, z, ll, g, tol, max_steps=50):
    """Safeguarded Newton ascent; steps never lower the likelihood beyond round-off."""
    history = []
    lo, hi = prob.bounds[:, 0], prob.bounds[:, 1]
    for _ in range(max_steps):
        pg = prob.projected(z, g)
        if np.max(np.abs(pg)) <= tol:
            break
        free = pg != 0
        try:
            H = prob.hessian(z)[np.ix_(free, free)]
        except EtprError:
            break
        w, V = np.linalg.eigh(-H)
        w = np.maximum(w, 1e-8 * max(1.0, np.max(np.abs(w))))
        step = np.zeros_like(z)
        step[free] = V @ ((V.T @ g[free]) / w)
        gmax = np.max(np.abs(pg))
        t = 1.0
        improved = False
        for _ in range(30):
            zn = np.clip(z + t * step, lo, hi)
            try:
                lln, gn = prob.value_grad(zn)
            except EtprError:
                lln = -np.inf
            # below round-off a step counts if the gradient shrinks
            if lln > ll or (
                lln >= ll - LL_NOISE * (1.0 + abs(ll))
                and np.max(np.abs(prob.projected(zn, gn))) < gmax
            ):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        z, ll, g = zn, lln, gn
        history.append(ll)
    return z, ll, g, history


def _optimise(prob, z0, opts):
    history = []

    def f(z):
        try:
            ll, g = prob.value_grad(z)
        except EtprError:
            return 1e300, np.zeros_like(z)
        return -ll, -g

    def cb(zk):
        ll, _ = prob.value_grad(zk)
        history.append(ll)

    res = minimize(
        f,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=prob.bounds,
        callback=cb,
        options={
            "maxiter": opts.max_iterations,
            "gtol": 0.1 * opts.gradient_tolerance,
            "ftol": 1e3 * np.finfo(float).eps,
            "maxcor": 20,
        },
    )
    z = np.clip(res.x, prob.bounds[:, 0], prob.bounds[:, 1])
    ll, g = prob.value_grad(z)
    budget = min(50, max(0, opts.max_iterations - int(res.nit)))
    z, ll, g, more = _newton_polish(prob, z, ll, g, opts.gradient_tolerance, budget)
    history += more
    gnorm = float(np.max(np.abs(prob.projected(z, g))))
    if prob.profile:
        gw = prob.full_gradient(z)
        gnorm = max(gnorm, abs(float(gw[prob.amp].sum())))
    return z, ll, gnorm, int(res.nit) + len(more), history


def _starts(data, kernel, opts, estimate_nu):
    """Deterministic list of ``(beta, nu)`` starting points."""
    ys = np.concatenate([c.y for c in data.curves])
    scale = float(np.var(ys)) if ys.size > 1 and np.var(ys) > 0 else 1.0
    phi0 = opts.phi0 if opts.phi0 is not None else 0.1 * scale
    m_theta = 1 if opts.tied else data.m
    amp = np.tile(kernel.amplitude_mask(), m_theta)
    lo, hi = PARAM_BOUNDS
    starts = [np.clip(np.concatenate([[phi0]] + [kernel.theta] * m_theta), lo, hi)]
    rng = make_rng(opts.seed, 7)
    for _ in range(opts.restarts - 1):
        b = np.exp(rng.uniform(np.log(1e-3), np.log(1e2), size=1 + amp.size))
        b[0] *= scale
        b[1:][amp] *= scale
        starts.append(np.clip(b, lo, hi))
    nus = [None] * len(starts)
    if estimate_nu:
        nus = [3.0] + list(np.exp(rng.uniform(np.log(1.1), np.log(20.0), size=opts.restarts - 1)))
    return list(zip(starts, nus))


def fit(data, kernel, opts=None):
    """Maximise the marginal likelihood over ``(phi, theta)`` (and ``nu``).

    Parameters
    ----------
    data : Dataset
    kernel : KernelConfig
        Kernel structure; its hyperparameters seed the first start.
    opts : FitOptions, optional

    Returns
    -------
    FittedModel
        The best of ``opts.restarts`` starts.  ``converged`` is false when the
        projected log-scale gradient max-norm exceeds the tolerance.
    """
    opts = opts or FitOptions()
    if opts.estimate_nu and data.m < 2:
        raise InvalidOptions(
            "nu is not identifiable with a single curve: use a fixed nu when m = 1"
        )
    if kernel.input_dim != data.p:
        raise InvalidOptions("kernel input_dim does not match the data")
    if opts.mode == "gpr":
        nu = math.inf
    elif opts.estimate_nu:
        nu = 3.0
    else:
        nu = opts.nu
    kernels = (kernel,) if opts.tied else (kernel,) * data.m
    template = ModelParams(1.0, kernels, nu, opts.tied)
    profile = kernel.amplitude_homogeneous and not opts.estimate_nu and (
        opts.mode == "gpr" or data.m == 1
    )
    prob = _Problem(data, template, opts.estimate_nu, profile)

    best = None
    restart_lls = []
    last_error = None
    for beta0, nu0 in _starts(data, kernel, opts, opts.estimate_nu):
        try:
            z, ll, gnorm, nit, hist = _optimise(prob, prob.to_z(beta0, nu0), opts)
        except EtprError as exc:
            last_error = exc
            restart_lls.append(float("nan"))
            continue
        restart_lls.append(ll)
        # near-ties go to the earlier start so flat optima are chosen stably
        if best is None or ll > best[1] + 1e-9 * (1.0 + abs(best[1])):
            best = (z, ll, gnorm, nit, hist)
    if best is None:
        if isinstance(last_error, SingularScale):
            raise last_error
        raise EtprError(f"all starts failed: {last_error}")

    z, ll, gnorm, nit, hist = best
    params = prob.params(z)
    se, nu_se = None, None
    try:
        se, nu_se = _std_errors(data, params, opts.estimate_nu)
    except HessianNotPD as exc:
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
    converged = gnorm <= opts.gradient_tolerance
    if not converged:
        log.info("fit stopped with gradient norm %.3g", gnorm)
    return rebuild(
        data,
        params,
        log_likelihood=ll,
        converged=converged,
        final_gradient_norm=gnorm,
        std_errors=se,
        options=opts,
        nu_std_error=nu_se,
        iterations=nit,
        history=tuple(hist),
        restart_log_likelihoods=tuple(restart_lls),
    )


def _std_errors(data, params, with_nu):
    beta = params.beta
    H = hessian_beta(data, params, log_scale=True, with_nu=with_nu)
    try:
        L, jitter = jittered_cholesky(-H)
    except SingularScale:
        raise HessianNotPD("negative Hessian is not positive definite") from None
    if jitter > 0:
        raise HessianNotPD("negative Hessian is not positive definite")
    cov = np.linalg.inv(-H)
    sd = np.sqrt(np.diag(cov))
    se = beta * sd[: beta.size]
    # nu row is already on the natural scale
    nu_se = float(sd[beta.size]) if with_nu else None
    return se, nu_se


def standard_errors(model):
    """Natural-scale standard errors of ``beta`` from the observed information.

    The inverse negative log-scale Hessian is mapped back with the delta
    method (``se(beta_k) = beta_k * se(log beta_k)``).
    """
    se, _ = _std_errors(model.data, model.params, model.options.estimate_nu)
    return se


def profile_nu(data, kernel, opts, grid):
    """Maximised log-likelihood over ``beta`` at each fixed ``nu`` in ``grid``.

    Returns a structured array with fields ``nu``, ``log_likelihood`` and
    ``ok``; failed cells carry ``nan`` and ``ok = False``.
    """
    rows = []
    for nu in grid:
        o = replace(opts, mode="etpr", nu=float(nu))
        try:
            res = fit(data, kernel, o)
            rows.append((float(nu), res.log_likelihood, True))
        except EtprError:
            rows.append((float(nu), float("nan"), False))
    return np.array(rows, dtype=[("nu", float), ("log_likelihood", float), ("ok", bool)])
