"""Random problem generators and finite-difference oracles shared by tests."""

import numpy as np

from etpr.kernels import KernelConfig, lin, matern, rq, se, vm
from etpr.model import Dataset, ModelParams, log_marginal_likelihood

KERNEL_SETS = ("SE", "LIN", "VM", "RQ", "MATERN", "SE+LIN", "SE+MATERN")


def _pos(rng, k, lo=0.3, hi=3.0):
    return tuple(np.exp(rng.uniform(np.log(lo), np.log(hi), size=k)))


def random_kernel(rng, name, p):
    terms = []
    for fam in name.split("+"):
        if fam == "SE":
            terms.append(se(*_pos(rng, p + 1)))
        elif fam == "LIN":
            terms.append(lin(*_pos(rng, p)))
        elif fam == "VM":
            terms.append(vm(*_pos(rng, 2)))
        elif fam == "RQ":
            terms.append(rq(*_pos(rng, p + 1)))
        else:
            order = 1.5 if rng.random() < 0.5 else float(rng.choice([0.5, 2.5, 1.2]))
            terms.append(matern(*_pos(rng, 1), order=order))
    return KernelConfig(tuple(terms), p)


def random_case(rng, name, m, n, p=1, nu=None, tied=True):
    """A random data set with random parameters for kernel set ``name``."""
    curves = []
    for _ in range(m):
        X = rng.uniform(0.0, 2.0, size=(n, p))
        y = rng.standard_normal(n)
        curves.append((X, y))
    kernels = tuple(random_kernel(rng, name, p) for _ in range(1 if tied else m))
    phi = float(np.exp(rng.uniform(np.log(0.05), np.log(1.0))))
    if nu is None:
        nu = float(rng.uniform(1.5, 10.0))
    return Dataset(curves), ModelParams(phi, kernels, nu, tied)


def fd_score(data, params, h=1e-6):
    """Central differences of the log-likelihood, step ``h`` relative to each entry."""
    beta = params.beta
    g = np.empty_like(beta)
    for k in range(beta.size):
        step = h * beta[k]
        bp, bm = beta.copy(), beta.copy()
        bp[k] += step
        bm[k] -= step
        g[k] = (
            log_marginal_likelihood(data, params.with_beta(bp))
            - log_marginal_likelihood(data, params.with_beta(bm))
        ) / (2.0 * step)
    return g


def fd_nu(data, params, h=1e-5):
    lp = log_marginal_likelihood(data, params.with_nu(params.nu + h))
    lm = log_marginal_likelihood(data, params.with_nu(params.nu - h))
    return (lp - lm) / (2.0 * h)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.abs(b), np.finfo(float).tiny)


# acceptance verdicts, printed in the terminal summary by conftest
ACCEPTANCE = {}


def record(number, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok
