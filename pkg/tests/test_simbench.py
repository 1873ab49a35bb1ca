from dataclasses import asdict

import numpy as np
import pytest
from scipy import stats

from etpr.errors import EtprError, InvalidOptions
from etpr.model import Dataset
from etpr.simbench import (
    Contamination,
    Design,
    ScenarioConfig,
    aggregate,
    case_m1,
    case_m2,
    case_m2_p3,
    contaminate,
    generate,
    mse,
    run_benchmark,
    table1,
)

DRAWS = 5000


def draws_at(case, positions, field="truth"):
    """Stack f (or noisy y) at fixed test positions over many replications."""
    out = []
    for rep in range(DRAWS):
        _, test, truth = generate(case, rep)
        src = truth[0] if field == "truth" else test.curves[0].y
        out.append(src[positions])
    return np.array(out)


def test_case1_covariance_matches_generating_gram():
    case = case_m1(1, n=20, outliers=False, seed=3)
    _, test, _ = generate(case, 0)
    pos = np.array([0, 6, 12, 18, 25])
    F = draws_at(case, pos)
    G = case.true_kernel().gram(test.curves[0].X[pos])
    C = np.cov(F.T)
    D = F - F.mean(axis=0)
    for i in range(5):
        for j in range(5):
            prod = D[:, i] * D[:, j]
            se = prod.std(ddof=1) / np.sqrt(DRAWS)
            assert abs(C[i, j] - G[i, j]) <= 4 * se


def test_case1_responses_are_gaussian():
    y = draws_at(case_m1(1, n=20, outliers=False, seed=4), np.array([10]), "y")[:, 0]
    assert stats.shapiro(y).pvalue > 0.01


def exceed(x, sd):
    return np.mean(np.abs(x) > 3 * sd)


def test_case5_function_has_heavier_tails_than_case1():
    pos = np.array([10])
    f1 = draws_at(case_m1(1, n=20, outliers=False, seed=5), pos)[:, 0]
    f5 = draws_at(case_m1(5, n=20, outliers=False, seed=5), pos)[:, 0]
    sd = f1.std()
    assert exceed(f5, sd) > exceed(f1, sd)


def test_case6_responses_have_heavier_tails_than_case1():
    pos = np.array([10])
    y1 = draws_at(case_m1(1, n=20, outliers=False, seed=6), pos, "y")[:, 0]
    y6 = draws_at(case_m1(6, n=20, outliers=False, seed=6), pos, "y")[:, 0]
    sd = y1.std()
    assert exceed(y6, sd) / exceed(y1, sd) > 1


def test_case6_shares_one_scale_between_f_and_noise():
    # with a common r the noise-to-signal ratio has the same law as in Case 1
    def ratio(case_id):
        case = case_m1(case_id, n=20, outliers=False, seed=8)
        vals = []
        for rep in range(400):
            _, test, truth = generate(case, rep)
            vals.append(np.var(test.curves[0].y - truth[0]) / np.var(truth[0]))
        return np.median(vals)

    assert ratio(6) == pytest.approx(ratio(1), rel=0.2)


def test_generate_is_deterministic_and_split_follows_design():
    case = case_m2(1, n=10, seed=2)
    a, b = generate(case, 5), generate(case, 5)
    for ca, cb in zip(a[0].curves + a[1].curves, b[0].curves + b[1].curves):
        assert np.array_equal(ca.X, cb.X) and np.array_equal(ca.y, cb.y)
    c = generate(case, 6)
    assert not np.array_equal(a[0].curves[0].y, c[0].curves[0].y)
    train, test, truth = a
    assert train.m == 2 and list(train.sizes) == [10, 10]
    assert all(len(t) == 40 for t in truth)
    # random subsets differ between curves
    assert not np.array_equal(train.curves[0].X, train.curves[1].X)


def test_table1_design_uses_dense_head_and_last_point():
    train, test, truth = generate(table1(n=10, replications=1), 0)
    x = train.curves[0].X[:, 0]
    assert x.size == 10
    assert x[-1] == 2.0 and x[-2] == pytest.approx(1.5)
    assert np.all(x[:-1] <= 1.5)
    assert test.curves[0].X.shape[0] == 51


def test_grid_sizes():
    assert case_m1(1, n=60).design.N == 100
    assert case_m1(1, n=100).design.N == 150
    assert case_m1(1, n=20).design.N == 50
    assert case_m1(1, n=60, N=120).design.N == 120
    g = case_m2_p3(1).design.grid()
    assert g.shape == (50, 3)
    assert g[:, 0].min() > -2.0 and g[:, 0].max() < 2.0


def test_scenario_validation():
    with pytest.raises(InvalidOptions):
        ScenarioConfig(case_id=7, m=1, n=5, theta_true=(1, 1, 1), phi_true=0.1)
    with pytest.raises(InvalidOptions):
        ScenarioConfig(case_id=1, m=1, n=5, theta_true=(1, 1), phi_true=0.1)
    with pytest.raises(InvalidOptions):
        ScenarioConfig(case_id=1, m=1, n=500, theta_true=(1, 1, 1), phi_true=0.1)
    with pytest.raises(InvalidOptions):
        Contamination("sprinkle")
    with pytest.raises(InvalidOptions):
        Contamination("peak", probability=1.5)
    with pytest.raises(InvalidOptions):
        Design("lattice")


def small_train():
    train, _, _ = generate(case_m2(1, n=10, outliers=False, seed=1), 0)
    return train


def test_zero_constant_disturbance_is_identity():
    train = small_train()
    out = contaminate(train, Contamination("constant_at_point", index=-1, delta=0.0), 1)
    for a, b in zip(train.curves, out.curves):
        assert np.array_equal(a.y, b.y)


def test_constant_disturbance_round_trip_and_no_mutation():
    train = small_train()
    before = [c.y.copy() for c in train.curves]
    up = contaminate(train, Contamination("constant_at_point", index=3, delta=2.5), 1)
    back = contaminate(up, Contamination("constant_at_point", index=3, delta=-2.5), 1)
    for y0, c in zip(before, train.curves):
        assert np.array_equal(y0, c.y)
    for y0, c, u in zip(before, back.curves, up.curves):
        assert u.y[3] - y0[3] == pytest.approx(2.5)
        assert np.all(np.abs(c.y - y0) <= np.spacing(np.abs(y0) + 2.5))


def test_peak_with_certain_hit_shifts_the_window():
    X = np.linspace(0, 1, 31)[:, None]
    train = Dataset.single(X, np.zeros(31))
    T = 0.4
    spec = Contamination("peak", probability=1.0, start_range=(T, T))
    y = contaminate(train, spec, 9).curves[0].y
    inside = (X[:, 0] >= T) & (X[:, 0] <= T + 1 / 15)
    assert inside.sum() >= 2
    assert np.all(np.abs(y[inside]) == 4.0) and len(set(y[inside])) == 1
    assert np.all(y[~inside] == 0.0)


def test_gaussian_disturbance_variance():
    train = Dataset.single(np.arange(3.0), np.zeros(3))
    spec = Contamination("gauss_at_point", index=-1, sigma2=4.0)
    added = np.array([contaminate(train, spec, (77, k)).curves[0].y[-1] for k in range(10_000)])
    var = added.var(ddof=1)
    se = np.sqrt(np.var((added - added.mean()) ** 2, ddof=1) / added.size)
    assert abs(var - 4.0) <= 4 * se


def test_t_error_touches_one_point_on_chosen_curves():
    train = small_train()
    out = contaminate(train, Contamination("t_error", index=None, df=2.0, curves=1), 4)
    changed = [np.flatnonzero(a.y != b.y) for a, b in zip(train.curves, out.curves)]
    assert sorted(len(c) for c in changed) == [0, 1]
    with pytest.raises(IndexError):
        contaminate(train, Contamination("constant_at_point", index=40, delta=1.0), 1)


def test_mse():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(37), rng.standard_normal(37)
    assert mse(a, a) == 0.0
    assert mse(a + 0.3, a) == pytest.approx(0.09, rel=1e-12)
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    assert abs(mse(a, b) - total / 37) <= 1e-14
    with pytest.raises(ValueError):
        mse(a, b[:-1])
    with pytest.raises(ValueError):
        mse([], [])


def oracle(train, test, case):
    # the case has one replication, numbered 0
    return generate(case, 0)[2]


def test_perfect_method_scores_zero():
    case = case_m1(1, n=20, outliers=False, replications=1)
    res = run_benchmark(case, [oracle])
    s = res.summaries["oracle"]
    assert s.mean_mse == 0.0 and s.n_ok == 1 and s.n_fail == 0


def test_failures_are_counted_not_dropped():
    def flaky(train, test, case):
        if train.curves[0].y[0] > 0:
            raise EtprError("refused")
        return [np.zeros(len(c.y)) for c in test.curves]

    case = case_m1(1, n=20, outliers=False, replications=12)
    res = run_benchmark(case, [flaky])
    s = res.summaries["flaky"]
    assert s.n_ok + s.n_fail == 12 and s.n_fail > 0
    assert len(res.records) == 12
    assert all(r.error["flaky"].startswith("EtprError") for r in res.records if np.isnan(r.mse["flaky"]))


def test_parallel_run_matches_serial_and_reaggregation():
    case = case_m2(1, n=8, replications=4, restarts=2, seed=5)
    serial = run_benchmark(case, ("gpr", "etpr"), threads=1)
    parallel = run_benchmark(case, ("gpr", "etpr"), threads=2)
    for m in ("gpr", "etpr"):
        np.testing.assert_equal(asdict(serial.summaries[m]), asdict(parallel.summaries[m]))
        assert [r.mse[m] for r in serial.records] == [r.mse[m] for r in parallel.records]
    again = aggregate(case, ("gpr", "etpr"), list(serial.records))
    for m in ("gpr", "etpr"):
        np.testing.assert_equal(asdict(again.summaries[m]), asdict(serial.summaries[m]))
    s = serial.summaries["etpr"]
    assert s.sd_mse >= 0 and np.isfinite(s.median_nu)
    assert np.isnan(serial.summaries["gpr"].median_nu)


def test_unknown_method_rejected():
    with pytest.raises(InvalidOptions):
        run_benchmark(case_m1(1, replications=1), ("loess",))
