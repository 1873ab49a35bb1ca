import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from etpr.cli import main
from etpr.estimate import fit, rebuild
from etpr.kernels import KernelConfig, se
from etpr.model import Dataset, ModelParams
from etpr.predict import predict_f, predict_y
from etpr.serialization import (
    fit_options_from_json,
    format_real,
    kernel_from_json,
    model_from_json,
    model_to_json,
    read_curves,
)

KERNEL = {"input_dim": 1, "terms": [{"family": "SE", "params": [1.0, 1.0]}, {"family": "LIN", "params": [1.0]}]}


def write_curves(path, rows, header=("curve_id", "x_1", "y")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def two_curves(path):
    rng = np.random.default_rng(0)
    rows = []
    for cid in (7, 3):
        for x in np.linspace(0, 2, 9):
            rows.append([cid, repr(float(x)), repr(float(np.sin(3 * x) + 0.1 * rng.standard_normal()))])
    return write_curves(path, rows)


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def fitted(tmp_path):
    data = two_curves(tmp_path / "train.csv")
    cfg = write_json(tmp_path / "cfg.json", {"kernel": KERNEL, "fit": {"nu": "estimate", "restarts": 2}, "seed": 4})
    out = tmp_path / "model.json"
    assert main(["fit", data, cfg, str(out)]) == 0
    return data, cfg, out


def test_fit_writes_a_model_that_round_trips(fitted, tmp_path):
    data, cfg, out = fitted
    doc = json.loads(out.read_text())
    assert doc["schema_version"] == 1 and doc["converged"]
    assert doc["nu_policy"] == "estimate" and doc["curve_ids"] == [3, 7]
    model, ids = model_from_json(doc)
    assert ids == [3, 7]
    ds, _ = read_curves(data)
    ref = fit(ds, kernel_from_json(KERNEL, 1), fit_options_from_json({"nu": "estimate", "restarts": 2}, 4))
    assert np.array_equal(model.params.beta, ref.params.beta)
    assert model.params.nu == ref.params.nu
    assert model.log_likelihood == ref.log_likelihood
    assert model_to_json(model, ids)["beta"] == doc["beta"]


def test_predict_matches_in_process_api_bit_for_bit(fitted, tmp_path):
    data, cfg, model_path = fitted
    q = write_curves(tmp_path / "q.csv", [[7, "1.9"], [3, "0.25"], [7, "0.5"], [3, "1.0"]], ("curve_id", "x_1"))
    out = tmp_path / "pred.csv"
    assert main(["predict", str(model_path), q, str(out), "--level", "0.9"]) == 0
    rows = read_rows(out)
    assert list(rows[0]) == ["curve_id", "u_1", "mean", "f_var", "y_var", "s0", "lower", "upper"]
    assert [(r["curve_id"], r["u_1"]) for r in rows] == [("3", "0.25"), ("3", "1"), ("7", "0.5"), ("7", "1.8999999999999999")]
    ds, ids = read_curves(data)
    ref = fit(ds, kernel_from_json(KERNEL, 1), fit_options_from_json({"nu": "estimate", "restarts": 2}, 4))
    p = predict_f(ref, ids.index(7), np.array([[0.5], [1.9]]), 0.9)
    got = rows[2:]
    assert [float(r["mean"]) for r in got] == p.mean.tolist()
    assert [float(r["f_var"]) for r in got] == p.f_variance.tolist()
    assert [float(r["upper"]) for r in got] == p.upper.tolist()


def test_predict_target_y_widens_intervals(fitted, tmp_path):
    _, _, model_path = fitted
    q = write_curves(tmp_path / "q.csv", [[3, "0.5"]], ("curve_id", "x_1"))
    f_out, y_out = tmp_path / "f.csv", tmp_path / "y.csv"
    assert main(["predict", str(model_path), q, str(f_out)]) == 0
    assert main(["predict", str(model_path), q, str(y_out), "--target", "y"]) == 0
    f, y = read_rows(f_out)[0], read_rows(y_out)[0]
    assert f["mean"] == y["mean"]
    assert float(y["upper"]) - float(y["lower"]) > float(f["upper"]) - float(f["lower"])


def test_empty_query_gives_header_only(fitted, tmp_path):
    _, _, model_path = fitted
    q = write_curves(tmp_path / "q.csv", [], ("curve_id", "x_1"))
    out = tmp_path / "pred.csv"
    assert main(["predict", str(model_path), q, str(out)]) == 0
    assert out.read_text().strip() == "curve_id,u_1,mean,f_var,y_var,s0,lower,upper"


def test_unknown_curve_in_query(fitted, tmp_path, capsys):
    _, _, model_path = fitted
    q = write_curves(tmp_path / "q.csv", [[5, "0.5"]], ("curve_id", "x_1"))
    assert main(["predict", str(model_path), q, str(tmp_path / "p.csv")]) == 1
    assert "unknown curve_id 5" in capsys.readouterr().err


def test_interpolation_through_cli(tmp_path):
    X = np.linspace(0, 1, 6)[:, None]
    y = np.cos(4 * X[:, 0])
    model = rebuild(Dataset.single(X, y), ModelParams(1e-12, (KernelConfig((se(1.0, 10.0),), 1),), 1.05))
    mpath = write_json(tmp_path / "m.json", model_to_json(model))
    q = write_curves(tmp_path / "q.csv", [[0, repr(float(x))] for x in X[:, 0]], ("curve_id", "x_1"))
    out = tmp_path / "p.csv"
    assert main(["predict", mpath, q, str(out)]) == 0
    assert np.allclose([float(r["mean"]) for r in read_rows(out)], y, atol=1e-6)


def test_missing_y_column(tmp_path, capsys):
    data = write_curves(tmp_path / "d.csv", [[0, "1.0", "2.0"]], ("curve_id", "x_1", "value"))
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL})
    assert main(["fit", data, cfg, str(tmp_path / "m.json")]) == 1
    err = capsys.readouterr().err
    assert "missing column 'y'" in err


def test_bad_number_reports_line_and_column(tmp_path, capsys):
    data = write_curves(tmp_path / "d.csv", [[0, "1.0", "2.0"], [0, "oops", "1.0"]])
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL})
    assert main(["fit", data, cfg, str(tmp_path / "m.json")]) == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "column" in err


def test_malformed_json_reports_position(tmp_path, capsys):
    data = two_curves(tmp_path / "d.csv")
    cfg = tmp_path / "c.json"
    cfg.write_text('{"kernel": {"terms": [}\n')
    assert main(["fit", data, str(cfg), str(tmp_path / "m.json")]) == 1
    assert "line 1, column" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    data = two_curves(tmp_path / "d.csv")
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL, "fit": {"learning_rate": 0.1}})
    assert main(["fit", data, cfg, str(tmp_path / "m.json")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_nu_estimation_with_one_curve_is_an_error(tmp_path, capsys):
    rows = [[0, repr(float(x)), repr(float(np.sin(x)))] for x in np.linspace(0, 2, 8)]
    data = write_curves(tmp_path / "d.csv", rows)
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL, "fit": {"nu": "estimate"}})
    out = tmp_path / "m.json"
    assert main(["fit", data, cfg, str(out)]) == 1
    assert "single curve" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.filterwarnings("ignore:negative Hessian")
def test_non_convergence_exits_with_warning_code(tmp_path):
    data = two_curves(tmp_path / "d.csv")
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL, "fit": {"max_iterations": 1, "restarts": 1}})
    out = tmp_path / "m.json"
    assert main(["fit", data, cfg, str(out)]) == 2
    assert json.loads(out.read_text())["converged"] is False


def test_argument_validation(tmp_path, monkeypatch, capsys):
    data = two_curves(tmp_path / "d.csv")
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL})
    assert main(["fit", data, cfg, str(tmp_path / "m.json"), "--level", "1.5"]) == 1
    assert main(["fit", data, cfg, str(tmp_path / "m.json"), "--threads", "0"]) == 1
    scen = write_json(tmp_path / "s.json", {"scenario": SCENARIO})
    monkeypatch.setenv("ETPR_THREADS", "many")
    assert main(["simulate", scen, str(tmp_path / "sim")]) == 0
    assert main(["benchmark", scen, str(tmp_path / "b")]) == 1
    assert "ETPR_THREADS" in capsys.readouterr().err


SCENARIO = {
    "case_id": 1,
    "m": 1,
    "n": 10,
    "theta_true": [0.05, 10.0, 0.05],
    "phi_true": 0.1,
    "design": {"kind": "even_grid", "ranges": [[0.0, 2.0]], "N": 61, "rule": "dense_plus_end", "dense": 46},
    "contamination": [{"kind": "gauss_at_point", "index": -1, "sigma2": 2.0}],
    "replications": 2,
    "fit_kernel": "se+matern",
}


def test_benchmark_smoke_is_fast_and_reproducible(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "b.json", {"scenario": SCENARIO, "seed": 1})
    t0 = time.perf_counter()
    assert main(["benchmark", cfg, str(tmp_path / "a")]) == 0
    assert time.perf_counter() - t0 < 60
    monkeypatch.setenv("ETPR_THREADS", "2")
    assert main(["benchmark", cfg, str(tmp_path / "b")]) == 0
    for name in ("aggregate.csv", "replications.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    agg = read_rows(tmp_path / "a" / "aggregate.csv")
    assert [r["method"] for r in agg] == ["gpr", "etpr", "etpr_fixed"]
    assert len(read_rows(tmp_path / "a" / "replications.csv")) == 6
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["replications"] == 2
    assert {"etpr", "numpy", "scipy", "python"} <= set(manifest["versions"])


def test_manifest_hash_tracks_config_content(tmp_path):
    def digest(obj, name, text=None):
        p = tmp_path / f"{name}.json"
        p.write_text(text if text is not None else json.dumps(obj))
        out = tmp_path / name
        assert main(["benchmark", str(p), str(out)]) == 0
        return json.loads((out / "manifest.json").read_text())["config_sha256"]

    base = {"scenario": dict(SCENARIO, replications=1), "methods": ["gpr"]}
    h1 = digest(base, "one")
    h2 = digest(base, "two", json.dumps(base, indent=4))
    h3 = digest({**base, "seed": 9}, "three")
    assert h1 == h2 and h1 != h3


def test_seed_flag_overrides_config(tmp_path):
    scen = write_json(tmp_path / "s.json", {"scenario": SCENARIO, "seed": 1})
    assert main(["simulate", scen, str(tmp_path / "a"), "--seed", "2"]) == 0
    s2 = write_json(tmp_path / "s2.json", {"scenario": SCENARIO, "seed": 2})
    assert main(["simulate", s2, str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "train.csv").read_bytes() == (tmp_path / "b" / "train.csv").read_bytes()
    assert main(["simulate", scen, str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "train.csv").read_bytes() != (tmp_path / "c" / "train.csv").read_bytes()


def test_invalid_case_id(tmp_path, capsys):
    cfg = write_json(tmp_path / "b.json", {"scenario": dict(SCENARIO, case_id=9)})
    assert main(["benchmark", cfg, str(tmp_path / "out")]) == 1
    assert "case_id" in capsys.readouterr().err


def test_simulate_then_fit(tmp_path):
    scen = write_json(tmp_path / "s.json", {"scenario": dict(SCENARIO, m=2, case_id=6), "replication": 3})
    assert main(["simulate", scen, str(tmp_path / "sim")]) == 0
    train = read_rows(tmp_path / "sim" / "train.csv")
    test = read_rows(tmp_path / "sim" / "test.csv")
    assert list(train[0]) == ["curve_id", "x_1", "y"]
    assert list(test[0]) == ["curve_id", "x_1", "y", "f_true"]
    assert len(train) == 20 and len(test) == 102
    cfg = write_json(tmp_path / "c.json", {"kernel": KERNEL, "fit": {"restarts": 2}})
    assert main(["fit", str(tmp_path / "sim" / "train.csv"), cfg, str(tmp_path / "m.json")]) in (0, 2)


def test_reals_use_seventeen_digits():
    assert format_real(0.1) == "0.10000000000000001"
    assert float(format_real(1 / 3)) == 1 / 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "etpr.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("etpr ")


def test_predict_y_api_and_cli_agree(fitted, tmp_path):
    _, _, model_path = fitted
    model, ids = model_from_json(json.loads(model_path.read_text()))
    q = write_curves(tmp_path / "q.csv", [[7, "0.3"]], ("curve_id", "x_1"))
    out = tmp_path / "p.csv"
    assert main(["predict", str(model_path), q, str(out), "--target", "y"]) == 0
    p = predict_y(model, ids.index(7), np.array([[0.3]]))
    assert float(read_rows(out)[0]["lower"]) == p.lower[0]
