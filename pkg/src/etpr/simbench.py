"""Simulation designs, contamination injectors and the replication runner.

Data follow ``y_i = f_i + eps_i`` on a fixed design grid with the generating
kernel ``k_se + k_lin``.  The six process cases are

1, 2  ``f ~ GP(0, k)``, Gaussian noise with variance ``phi``;
3, 4  ``f ~ GP(0, k)``, noise ``sqrt(phi) t_2``;
5     ``f ~ ETP(2, 2, 0, k)`` and noise ``ETP(2, 2, 0, phi I)``, independent;
6     ``f`` and the noise share one mixing scale ``r ~ IG(2, 2)`` per curve.

Every random draw comes from a Philox stream keyed by
``(seed, replication, curve, purpose)`` so results do not depend on the
order replications are run in.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .emtd import make_rng
from .errors import EtprError, InvalidOptions
from .estimate import FitOptions, fit
from .kernels import KernelConfig, lin, matern, se
from .model import Curve, Dataset
from .predict import predict_f

__all__ = [
    "Design",
    "Contamination",
    "ScenarioConfig",
    "BenchResult",
    "MethodSummary",
    "ReplicationRecord",
    "generate",
    "contaminate",
    "mse",
    "run_benchmark",
    "table1",
    "case_m1",
    "case_m2",
    "case_m2_p3",
]

CONTAMINATION_KINDS = ("gauss_at_point", "constant_at_point", "t_error", "peak")
METHODS = ("gpr", "etpr", "etpr_fixed")

# stream purposes
_F, _EPS, _SPLIT, _CONTAM = 0, 1, 2, 3

# (f law, noise law); "etp" draws use IG(2, 2)
CASE_LAWS = {
    1: ("gp", "normal"),
    2: ("gp", "normal"),
    3: ("gp", "t2"),
    4: ("gp", "t2"),
    5: ("etp", "etp"),
    6: ("joint", "joint"),
}
ETP_SHAPE = 2.0
ETP_SCALE = 2.0


@dataclass(frozen=True)
class Design:
    """Input grid and train/test split rule.

    ``kind="even_grid"`` uses one fixed split for every curve:
    ``rule="even"`` takes ``n`` evenly spaced grid indices, while
    ``rule="dense_plus_end"`` takes ``n - 1`` indices evenly spread over the
    first ``dense`` grid points plus the last point.  ``kind="random_subset"``
    draws ``n`` training indices per curve.  With ``open_ends`` the grid
    excludes the interval endpoints.
    """

    kind: str = "even_grid"
    ranges: tuple = ((0.0, 3.0),)
    N: int = 50
    rule: str = "even"
    dense: int = 0
    open_ends: bool = False

    def __post_init__(self):
        if self.kind not in ("even_grid", "random_subset"):
            raise InvalidOptions(f"unknown design kind {self.kind!r}")
        if self.rule not in ("even", "dense_plus_end"):
            raise InvalidOptions(f"unknown split rule {self.rule!r}")
        object.__setattr__(self, "ranges", tuple(tuple(map(float, r)) for r in self.ranges))
        if self.N < 2:
            raise InvalidOptions("design needs at least two grid points")

    @property
    def p(self):
        return len(self.ranges)

    def grid(self):
        cols = []
        for a, b in self.ranges:
            if self.open_ends:
                cols.append(np.linspace(a, b, self.N + 2)[1:-1])
            else:
                cols.append(np.linspace(a, b, self.N))
        return np.column_stack(cols)

    def train_indices(self, n, rng=None):
        if self.kind == "random_subset":
            return np.sort(rng.choice(self.N, size=n, replace=False))
        if self.rule == "even":
            return np.round(np.linspace(0, self.N - 1, n)).astype(int)
        head = np.round(np.linspace(0, self.dense - 1, n - 1)).astype(int)
        return np.append(head, self.N - 1)


@dataclass(frozen=True)
class Contamination:
    """Extra disturbance applied to training responses.

    kinds and the fields they use:

    ``gauss_at_point``     ``index``, ``sigma2``: add ``N(0, sigma2)``
    ``constant_at_point``  ``index``, ``delta``: add ``delta``
    ``t_error``            ``df``, ``curves``, ``index``: add a ``t_df`` draw
    ``peak``               ``probability``, ``amplitude``, ``width``, ``start_range``

    ``index`` is a training position (negative counts from the end); ``None``
    picks one position at random per affected curve.  ``curves`` limits the
    disturbance to that many randomly chosen curves (``None`` means all).
    """

    kind: str
    index: object = -1
    sigma2: float = 1.0
    delta: float = 0.0
    df: float = 1.0
    curves: object = None
    probability: float = 0.8
    amplitude: float = 4.0
    width: float = 1.0 / 15.0
    start_range: tuple = (0.0, 14.0 / 15.0)

    def __post_init__(self):
        if self.kind not in CONTAMINATION_KINDS:
            raise InvalidOptions(f"unknown contamination kind {self.kind!r}")
        if self.sigma2 < 0:
            raise InvalidOptions("sigma2 must be non-negative")
        if self.df <= 0:
            raise InvalidOptions("df must be positive")
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidOptions("probability must lie in [0, 1]")
        if self.width < 0:
            raise InvalidOptions("width must be non-negative")
        object.__setattr__(self, "start_range", tuple(map(float, self.start_range)))


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``theta_true`` holds the generating ``k_se + k_lin`` hyperparameters
    ``(eta0, eta1..eta_p, xi0..xi_{p-1})``.  ``fit_kernel`` names the kernel
    used by the fitted models: ``"se+matern"`` or ``"se+lin"``.
    """

    case_id: int
    m: int
    n: int
    theta_true: tuple
    phi_true: float
    design: Design = field(default_factory=Design)
    contamination: tuple = ()
    replications: int = 100
    seed: int = 0
    fit_kernel: str = "se+lin"
    matern_order: float = 1.5
    restarts: int = 5
    gradient_tolerance: float = 1e-8
    fixed_nu: float = 1.05

    def __post_init__(self):
        if self.case_id not in CASE_LAWS:
            raise InvalidOptions(f"case_id must be in 1..6, got {self.case_id}")
        if self.m < 1 or self.replications < 1:
            raise InvalidOptions("m and replications must be at least 1")
        if not 1 <= self.n <= self.design.N:
            raise InvalidOptions("n must lie between 1 and the grid size")
        if self.fit_kernel not in ("se+matern", "se+lin"):
            raise InvalidOptions(f"unknown fit kernel {self.fit_kernel!r}")
        c = self.contamination
        if isinstance(c, Contamination):
            c = (c,)
        object.__setattr__(self, "contamination", tuple(c or ()))
        theta = tuple(map(float, self.theta_true))
        if len(theta) != 2 * self.p + 1:
            raise InvalidOptions(f"theta_true needs {2 * self.p + 1} entries for p={self.p}")
        object.__setattr__(self, "theta_true", theta)

    @property
    def p(self):
        return self.design.p

    def true_kernel(self):
        p = self.p
        t = self.theta_true
        return KernelConfig((se(t[0], *t[1 : p + 1]), lin(*t[p + 1 :])), p)

    def start_kernel(self):
        """Neutral starting kernel for the fits."""
        p = self.p
        if self.fit_kernel == "se+matern":
            return KernelConfig((se(1.0, *[1.0] * p), matern(1.0, self.matern_order)), p)
        return KernelConfig((se(1.0, *[1.0] * p), lin(*[1.0] * p)), p)


# generation -------------------------------------------------------------
def _psd_sqrt(K):
    """Symmetric square root factor of a PSD matrix (handles rank loss)."""
    w, V = np.linalg.eigh(K)
    return V * np.sqrt(np.clip(w, 0.0, None))


def _t_draw(rng, df, size=None):
    z = rng.standard_normal(size)
    return z / np.sqrt(rng.chisquare(df, size) / df)


def _ig(rng):
    return ETP_SCALE / rng.standard_gamma(ETP_SHAPE)


def generate(case, replication):
    """Draw one replication of ``case``.

    Returns
    -------
    train : Dataset
    test : Dataset
        Test inputs with their noisy responses.
    truth : list of ndarray
        True ``f_i`` at each curve's test inputs.
    """
    X = case.design.grid()
    N = X.shape[0]
    R = _psd_sqrt(case.true_kernel().gram(X))
    f_law, e_law = CASE_LAWS[case.case_id]
    sphi = math.sqrt(case.phi_true)
    train, test, truth = [], [], []
    for i in range(case.m):
        rf = make_rng(case.seed, replication, i, _F)
        re = make_rng(case.seed, replication, i, _EPS)
        f = R @ rf.standard_normal(N)
        e = re.standard_normal(N)
        if f_law == "etp":
            f *= math.sqrt(_ig(rf))
        if e_law == "t2":
            e = _t_draw(re, 2.0, N)
        elif e_law == "etp":
            e *= math.sqrt(_ig(re))
        if f_law == "joint":
            r = _ig(rf)
            f *= math.sqrt(r)
            e *= math.sqrt(r)
        y = f + sphi * e
        idx = case.design.train_indices(case.n, make_rng(case.seed, replication, i, _SPLIT))
        mask = np.zeros(N, dtype=bool)
        mask[idx] = True
        train.append(Curve(X[mask], y[mask]))
        test.append(Curve(X[~mask], y[~mask]))
        truth.append(f[~mask])
    return Dataset(train), Dataset(test), truth


def _stream_key(seed):
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def contaminate(train, spec, seed):
    """Return a copy of ``train`` with ``spec`` applied; ``train`` is untouched.

    ``seed`` is an integer or a tuple of integers naming the random stream.
    """
    key = _stream_key(seed)
    rng = make_rng(*key, _CONTAM)
    m = train.m
    if spec.curves is None:
        chosen = np.arange(m)
    else:
        k = int(spec.curves)
        if not 0 <= k <= m:
            raise InvalidOptions(f"cannot disturb {k} of {m} curves")
        chosen = np.sort(rng.choice(m, size=k, replace=False))
    curves = list(train.curves)
    for i in chosen:
        c = curves[i]
        y = c.y.copy()
        n = y.shape[0]
        if spec.kind == "peak":
            hit = rng.random() < spec.probability
            sign = 1.0 if rng.random() < 0.5 else -1.0
            T = rng.uniform(*spec.start_range)
            u = c.X[:, 0]
            inside = (u >= T) & (u <= T + spec.width)
            y[inside] += spec.amplitude * hit * sign
        else:
            if spec.index is None:
                j = int(rng.integers(n))
            else:
                j = int(spec.index)
                if not -n <= j < n:
                    raise IndexError(f"training index {j} out of range for curve {i}")
            if spec.kind == "gauss_at_point":
                y[j] += math.sqrt(spec.sigma2) * rng.standard_normal()
            elif spec.kind == "constant_at_point":
                y[j] += spec.delta
            else:
                y[j] += _t_draw(rng, spec.df)
        curves[i] = Curve(c.X, y)
    return Dataset(curves)


def mse(predictions, truth):
    """Mean squared deviation between predictions and true values."""
    a = np.asarray(predictions, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} predictions, {b.size} true values")
    if a.size == 0:
        raise ValueError("mse needs at least one point")
    return float(np.mean((a - b) ** 2))


# benchmark --------------------------------------------------------------
@dataclass(frozen=True)
class MethodSummary:
    method: str
    mean_mse: float
    sd_mse: float
    n_ok: int
    n_fail: int
    n_not_converged: int
    median_nu: float = float("nan")


@dataclass(frozen=True)
class ReplicationRecord:
    replication: int
    mse: dict
    nu_hat: dict
    converged: dict
    error: dict


@dataclass(frozen=True)
class BenchResult:
    config: ScenarioConfig
    methods: tuple
    summaries: dict
    records: tuple

    def aggregate_rows(self):
        return [self.summaries[m] for m in self.methods]


def _method_name(method):
    return method if isinstance(method, str) else getattr(method, "__name__", "custom")


def _fit_options(case, method, seed):
    common = dict(
        seed=seed,
        restarts=case.restarts,
        gradient_tolerance=case.gradient_tolerance,
    )
    if method == "gpr":
        return FitOptions(mode="gpr", **common)
    if method == "etpr_fixed" or case.m == 1:
        return FitOptions(mode="etpr", nu=case.fixed_nu, **common)
    return FitOptions(mode="etpr", nu="estimate", **common)


def _run_method(case, method, train, test, replication):
    """Return (predictions per curve, nu_hat, converged)."""
    if callable(method):
        return method(train, test, case), float("nan"), True
    opts = _fit_options(case, method, int(make_rng(case.seed, replication).integers(2**31)))
    model = fit(train, case.start_kernel(), opts)
    preds = [predict_f(model, i, c.X).mean for i, c in enumerate(test.curves)]
    return preds, model.params.nu, model.converged


def run_replication(case, methods, replication):
    train, test, truth = generate(case, replication)
    for j, spec in enumerate(case.contamination):
        train = contaminate(train, spec, (case.seed, replication, j))
    out = {"mse": {}, "nu_hat": {}, "converged": {}, "error": {}}
    flat_truth = np.concatenate(truth)
    for method in methods:
        name = _method_name(method)
        try:
            preds, nu_hat, conv = _run_method(case, method, train, test, replication)
            out["mse"][name] = mse(np.concatenate(preds), flat_truth)
            out["nu_hat"][name] = nu_hat
            out["converged"][name] = bool(conv)
            out["error"][name] = ""
        except (EtprError, np.linalg.LinAlgError) as exc:
            out["mse"][name] = float("nan")
            out["nu_hat"][name] = float("nan")
            out["converged"][name] = False
            out["error"][name] = f"{type(exc).__name__}: {exc}"
    return ReplicationRecord(replication, **out)


def _star(args):
    return run_replication(*args)


def aggregate(case, methods, records):
    """Per-method summaries; failed replications are counted, not averaged."""
    names = tuple(_method_name(m) for m in methods)
    summaries = {}
    for name in names:
        vals = np.array([r.mse[name] for r in records])
        ok = ~np.isnan(vals)
        good = vals[ok]
        nus = np.array([r.nu_hat[name] for r in records])[ok]
        nus = nus[np.isfinite(nus)]
        summaries[name] = MethodSummary(
            method=name,
            mean_mse=float(np.mean(good)) if good.size else float("nan"),
            sd_mse=float(np.std(good, ddof=1)) if good.size > 1 else 0.0,
            n_ok=int(ok.sum()),
            n_fail=int((~ok).sum()),
            n_not_converged=int(sum(1 for r in records if r.error[name] == "" and not r.converged[name])),
            median_nu=float(np.median(nus)) if nus.size else float("nan"),
        )
    return BenchResult(case, names, summaries, tuple(records))


def run_benchmark(config, methods=METHODS, threads=1):
    """Run every replication of ``config`` for each method.

    Parameters
    ----------
    config : ScenarioConfig
    methods : sequence
        Method names from ``METHODS`` or callables
        ``method(train, test, config) -> list of per-curve predictions``.
    threads : int
        Worker processes; results are identical for any value.

    Returns
    -------
    BenchResult
    """
    for m in methods:
        if isinstance(m, str) and m not in METHODS:
            raise InvalidOptions(f"unknown method {m!r}; choose from {METHODS}")
    jobs = [(config, tuple(methods), r) for r in range(config.replications)]
    if threads > 1 and all(isinstance(m, str) for m in methods):
        with ProcessPoolExecutor(max_workers=threads) as ex:
            records = list(ex.map(_star, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        records = [_star(j) for j in jobs]
    return aggregate(config, methods, records)


# presets ----------------------------------------------------------------
def table1(n=10, sigma2=2.0, replications=100, seed=0, **kw):
    """Sparse-end design with a Gaussian disturbance at the point 2.0."""
    return ScenarioConfig(
        case_id=1,
        m=1,
        n=n,
        theta_true=(0.05, 10.0, 0.05),
        phi_true=0.1,
        design=Design("even_grid", ((0.0, 2.0),), 61, "dense_plus_end", dense=46),
        contamination=(Contamination("gauss_at_point", index=-1, sigma2=sigma2),),
        replications=replications,
        seed=seed,
        fit_kernel="se+matern",
        **kw,
    )


_M1_THETA = {1: (0.05, 2.0, 0.05), 2: (0.1, 4.0, 0.1)}
# large-sample grids; other n use 50 points
_M1_GRID = {60: 100, 100: 150}


def case_m1(case_id, n=20, outliers=True, peak=False, replications=100, seed=0, N=None, **kw):
    """Single-curve process cases on an even grid over [0, 3].

    The grid has 50 points, or 100 and 150 points for ``n = 60`` and
    ``n = 100``, unless ``N`` is given.
    """
    if N is None:
        N = _M1_GRID.get(n, 50)
    theta = _M1_THETA[2] if case_id in (2, 4) else _M1_THETA[1]
    contamination = ()
    if case_id in (1, 2, 5, 6):
        if peak:
            contamination = (Contamination("peak"),)
        elif outliers:
            contamination = (Contamination("t_error", index=-1, df=1.0),)
    return ScenarioConfig(
        case_id=case_id,
        m=1,
        n=n,
        theta_true=theta,
        phi_true=0.1,
        design=Design("even_grid", ((0.0, 3.0),), N, "even"),
        contamination=contamination,
        replications=replications,
        seed=seed,
        fit_kernel="se+matern",
        **kw,
    )


def case_m2(case_id, n=10, outliers=True, replications=100, seed=0, **kw):
    """Two curves, ``n`` random training points each on 50 grid points in [0, 3]."""
    small = case_id not in (2, 4)
    theta = (0.025, 2.0, 0.025) if small else (0.05, 2.0, 0.05)
    contamination = ()
    if outliers and case_id in (1, 2, 5, 6):
        contamination = (Contamination("t_error", index=None, df=2.0),)
    return ScenarioConfig(
        case_id=case_id,
        m=2,
        n=n,
        theta_true=theta,
        phi_true=0.05 if small else 0.1,
        design=Design("random_subset", ((0.0, 3.0),), 50),
        contamination=contamination,
        replications=replications,
        seed=seed,
        fit_kernel="se+lin",
        **kw,
    )


def case_m2_p3(case_id, m=2, n=10, outliers=True, replications=100, seed=0, **kw):
    """Three-dimensional inputs on the open intervals (-2, 2), (0, 3), (1, 2)."""
    big = case_id in (2, 4)
    theta = (0.1, 4.0, 4.0, 4.0, 0.1, 0.1, 0.1) if big else (0.05, 2.0, 2.0, 2.0, 0.05, 0.05, 0.05)
    contamination = ()
    if outliers and case_id in (1, 2, 5, 6):
        contamination = (
            Contamination("t_error", index=None, df=2.0, curves=None if m == 2 else 2),
        )
    return ScenarioConfig(
        case_id=case_id,
        m=m,
        n=n,
        theta_true=theta,
        phi_true=0.1 if big else 0.05,
        design=Design(
            "random_subset", ((-2.0, 2.0), (0.0, 3.0), (1.0, 2.0)), 50, open_ends=True
        ),
        contamination=contamination,
        replications=replications,
        seed=seed,
        fit_kernel="se+lin",
        **kw,
    )


def with_replications(config, replications):
    return replace(config, replications=replications)
