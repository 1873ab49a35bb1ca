"""Command line interface: ``etpr fit|predict|benchmark|simulate``.

Exit codes: 0 success, 1 error, 2 finished with warnings (a fit that did not
reach the gradient tolerance, or benchmark replications that failed).
"""

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import EtprError, InvalidOptions
from .estimate import fit
from .predict import predict_f, predict_y
from .serialization import (
    config_hash,
    csv_text,
    fit_options_from_json,
    kernel_from_json,
    load_config,
    model_from_json,
    model_to_json,
    read_curves,
    read_query,
    scenario_from_json,
    write_text_atomic,
)
from .simbench import METHODS, contaminate, generate, run_benchmark

log = logging.getLogger("etpr")

OK, ERROR, WARN = 0, 1, 2


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("ETPR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidOptions(f"ETPR_THREADS must be an integer, got {env!r}") from None
    return 1


def _seed(args, cfg, default=0):
    if args.seed is not None:
        return args.seed
    return cfg.get("seed", default)


def _level(args, cfg):
    return args.level if args.level is not None else cfg.get("interval_level", 0.95)


def cmd_fit(args):
    data, ids = read_curves(args.data)
    cfg = load_config(args.config)
    if "kernel" not in cfg:
        raise InvalidOptions("config has no 'kernel' block")
    kernel = kernel_from_json(cfg["kernel"], data.p)
    seed = _seed(args, cfg, cfg.get("fit", {}).get("seed", 0))
    opts = fit_options_from_json(cfg.get("fit"), seed)
    model = fit(data, kernel, opts)
    doc = model_to_json(model, ids)
    doc["interval_level"] = _level(args, cfg)
    write_text_atomic(args.out, json.dumps(doc, indent=2) + "\n")
    if not model.converged:
        log.warning(
            "fit did not reach gradient tolerance %.3g (final %.3g); model written",
            opts.gradient_tolerance,
            model.final_gradient_norm,
        )
        return WARN
    return OK


PREDICTION_COLUMNS = ("mean", "f_var", "y_var", "s0", "lower", "upper")


def cmd_predict(args):
    with open(args.model, encoding="utf-8") as fh:
        doc = json.load(fh)
    model, ids = model_from_json(doc)
    qids, U = read_query(args.query)
    p = model.data.p
    if U.shape[1] != p:
        raise InvalidOptions(f"query has {U.shape[1]} input columns, model expects {p}")
    level = args.level if args.level is not None else doc.get("interval_level", 0.95)
    index = {cid: i for i, cid in enumerate(ids)}
    unknown = sorted(set(qids.tolist()) - set(index))
    if unknown:
        raise InvalidOptions(f"unknown curve_id {unknown[0]} (fitted curves: {ids})")
    predict = predict_y if args.target == "y" else predict_f
    order = np.lexsort((U[:, 0], qids)) if len(qids) else np.zeros(0, dtype=int)
    rows = []
    for cid in sorted(set(qids.tolist())):
        sel = order[qids[order] == cid]
        pr = predict(model, index[cid], U[sel], level)
        for j in range(len(sel)):
            rows.append(
                [cid, *map(float, U[sel[j]]), float(pr.mean[j]), float(pr.f_variance[j]),
                 float(pr.y_variance[j]), float(pr.s0), float(pr.lower[j]), float(pr.upper[j])]
            )
    header = ["curve_id", *[f"u_{j}" for j in range(1, p + 1)], *PREDICTION_COLUMNS]
    write_text_atomic(args.out, csv_text(header, rows))
    return OK


def _scenario(cfg, args):
    if "scenario" not in cfg:
        raise InvalidOptions("config has no 'scenario' block")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    return scenario_from_json(cfg["scenario"], seed)


def _versions():
    return {
        "etpr": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def cmd_benchmark(args):
    cfg = load_config(args.config)
    scenario = _scenario(cfg, args)
    methods = tuple(cfg.get("methods", METHODS))
    result = run_benchmark(scenario, methods, threads=_threads(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = [
        [s.method, s.mean_mse, s.sd_mse, s.n_ok, s.n_fail, s.n_not_converged, s.median_nu]
        for s in result.aggregate_rows()
    ]
    write_text_atomic(
        out / "aggregate.csv",
        csv_text(["method", "mean_mse", "sd_mse", "n_ok", "n_fail", "n_not_converged", "median_nu"], agg),
    )
    reps = []
    for r in result.records:
        for m in result.methods:
            reps.append([r.replication, m, r.mse[m], float(r.nu_hat[m]), int(r.converged[m]), r.error[m]])
    write_text_atomic(
        out / "replications.csv",
        csv_text(["replication", "method", "mse", "nu_hat", "converged", "error"], reps),
    )
    manifest = {
        "config_sha256": config_hash(cfg),
        "seed": scenario.seed,
        "replications": scenario.replications,
        "methods": list(result.methods),
        "versions": _versions(),
    }
    write_text_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    failed = sum(s.n_fail for s in result.aggregate_rows())
    if failed:
        log.warning("%d method fits failed; see replications.csv", failed)
        return WARN
    return OK


def cmd_simulate(args):
    cfg = load_config(args.config)
    scenario = _scenario(cfg, args)
    rep = args.replication if args.replication is not None else cfg.get("replication", 0)
    train, test, truth = generate(scenario, rep)
    for j, spec in enumerate(scenario.contamination):
        train = contaminate(train, spec, (scenario.seed, rep, j))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = train.p
    xcols = [f"x_{j}" for j in range(1, p + 1)]
    rows = [[i, *map(float, x), float(v)] for i, c in enumerate(train.curves) for x, v in zip(c.X, c.y)]
    write_text_atomic(out / "train.csv", csv_text(["curve_id", *xcols, "y"], rows))
    rows = [
        [i, *map(float, x), float(v), float(f)]
        for i, (c, t) in enumerate(zip(test.curves, truth))
        for x, v, f in zip(c.X, c.y, t)
    ]
    write_text_atomic(out / "test.csv", csv_text(["curve_id", *xcols, "y", "f_true"], rows))
    return OK


def build_parser():
    parser = argparse.ArgumentParser(prog="etpr", description="Extended t-process regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: $ETPR_THREADS or 1)")
    common.add_argument("--level", type=float, default=None, help="interval probability (default 0.95)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a model to curve data")
    p.add_argument("data", help="CSV with curve_id, x_1..x_p, y")
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("out", help="model JSON to write")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict from a fitted model")
    p.add_argument("model", help="model JSON written by 'fit'")
    p.add_argument("query", help="CSV with curve_id, x_1..x_p")
    p.add_argument("out", help="prediction CSV to write")
    p.add_argument("--target", choices=("f", "y"), default="f", help="interval for f or for a new y")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", parents=[common], help="run a simulation benchmark")
    p.add_argument("config", help="JSON configuration with a 'scenario' block")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("simulate", parents=[common], help="write one simulated data set")
    p.add_argument("config", help="JSON configuration with a 'scenario' block")
    p.add_argument("out_dir")
    p.add_argument("--replication", type=int, default=None)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    if args.level is not None and not 0.0 < args.level < 1.0:
        print("error: --level must lie in (0, 1)", file=sys.stderr)
        return ERROR
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return ERROR
    try:
        return args.func(args)
    except (EtprError, OSError, ValueError, IndexError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
