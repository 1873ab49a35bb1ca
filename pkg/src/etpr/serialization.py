"""JSON and CSV formats used by the command line tool.

Reals are written with 17 significant digits so every value round-trips
bit-exactly; model JSON relies on Python's shortest-repr floats for the same
reason.  Files are written to a temporary sibling and renamed into place.
"""

import csv
import hashlib
import io
import json
import math
import os
import tempfile

import jsonschema
import numpy as np

from .errors import EtprError, InvalidOptions
from .estimate import FitOptions, rebuild
from .kernels import FAMILIES, KernelConfig, KernelTerm
from .model import Curve, Dataset, ModelParams
from .simbench import Contamination, Design, ScenarioConfig

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "CONFIG_SCHEMA",
    "FormatError",
    "read_curves",
    "read_query",
    "load_config",
    "kernel_from_json",
    "kernel_to_json",
    "fit_options_from_json",
    "scenario_from_json",
    "model_to_json",
    "model_from_json",
    "write_text_atomic",
    "format_real",
    "csv_text",
    "config_hash",
]


class FormatError(EtprError, ValueError):
    """Malformed input file."""


_KERNEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["terms"],
    "properties": {
        "input_dim": {"type": "integer", "minimum": 1},
        "terms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["family", "params"],
                "properties": {
                    "family": {"enum": list(FAMILIES)},
                    "params": {"type": "array", "items": {"type": "number"}},
                    "order": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
    },
}

_FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["etpr", "gpr"]},
        "nu": {"oneOf": [{"type": "number", "exclusiveMinimum": 1}, {"const": "estimate"}]},
        "max_iterations": {"type": "integer", "minimum": 1},
        "gradient_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "restarts": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "tied": {"type": "boolean"},
        "phi0": {"type": "number", "exclusiveMinimum": 0},
    },
}

_CONTAMINATION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["gauss_at_point", "constant_at_point", "t_error", "peak"]},
        "index": {"type": ["integer", "null"]},
        "sigma2": {"type": "number", "minimum": 0},
        "delta": {"type": "number"},
        "df": {"type": "number", "exclusiveMinimum": 0},
        "curves": {"type": ["integer", "null"], "minimum": 0},
        "probability": {"type": "number", "minimum": 0, "maximum": 1},
        "amplitude": {"type": "number"},
        "width": {"type": "number", "minimum": 0},
        "start_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    },
}

_SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["case_id", "m", "n", "theta_true", "phi_true"],
    "properties": {
        "case_id": {"type": "integer", "minimum": 1, "maximum": 6},
        "m": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "theta_true": {"type": "array", "items": {"type": "number"}},
        "phi_true": {"type": "number", "exclusiveMinimum": 0},
        "design": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["even_grid", "random_subset"]},
                "ranges": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                },
                "N": {"type": "integer", "minimum": 2},
                "rule": {"enum": ["even", "dense_plus_end"]},
                "dense": {"type": "integer", "minimum": 0},
                "open_ends": {"type": "boolean"},
            },
        },
        "contamination": {"type": "array", "items": _CONTAMINATION_SCHEMA},
        "replications": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "fit_kernel": {"enum": ["se+matern", "se+lin"]},
        "matern_order": {"type": "number", "exclusiveMinimum": 0},
        "restarts": {"type": "integer", "minimum": 1},
        "gradient_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "fixed_nu": {"type": "number", "exclusiveMinimum": 1},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kernel": _KERNEL_SCHEMA,
        "fit": _FIT_SCHEMA,
        "interval_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer"},
        "scenario": _SCENARIO_SCHEMA,
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {"enum": ["gpr", "etpr", "etpr_fixed"]},
        },
        "replication": {"type": "integer", "minimum": 0},
    },
}


# files ------------------------------------------------------------------
def write_text_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_real(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def csv_text(header, rows):
    """CSV with ``\\n`` line ends; floats get 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_real(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _read_table(path, required_prefix):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise FormatError(f"{path}: line 1: missing header")
    header = [h.strip() for h in rows[0]]
    if "curve_id" not in header:
        raise FormatError(f"{path}: line 1: missing column 'curve_id'")
    xs = sorted(
        (h for h in header if h.startswith(required_prefix)),
        key=lambda h: _x_index(path, h, required_prefix),
    )
    if not xs:
        raise FormatError(f"{path}: line 1: missing column '{required_prefix}1'")
    expected = [f"{required_prefix}{j}" for j in range(1, len(xs) + 1)]
    if xs != expected:
        missing = sorted(set(expected) - set(xs))
        raise FormatError(f"{path}: line 1: missing column '{missing[0]}'")
    return header, xs, rows[1:]


def _x_index(path, name, prefix):
    try:
        return int(name[len(prefix):])
    except ValueError:
        raise FormatError(f"{path}: line 1: bad column name '{name}'") from None


def _parse_rows(path, header, columns, rows):
    pos = [header.index(c) for c in columns]
    out = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        vals = []
        for c, k in zip(columns, pos):
            text = row[k].strip()
            try:
                vals.append(int(text) if c == "curve_id" else float(text))
            except ValueError:
                raise FormatError(
                    f"{path}: line {lineno}, column '{c}': cannot parse {text!r}"
                ) from None
        out.append(vals)
    return out


def read_curves(path):
    """Training data CSV with columns ``curve_id, x_1..x_p, y``.

    Returns
    -------
    data : Dataset
        Curves ordered by increasing ``curve_id``; rows keep file order.
    curve_ids : list of int
    """
    header, xs, rows = _read_table(path, "x_")
    if "y" not in header:
        raise FormatError(f"{path}: line 1: missing column 'y'")
    parsed = _parse_rows(path, header, ["curve_id", *xs, "y"], rows)
    if not parsed:
        raise FormatError(f"{path}: no data rows")
    ids = sorted({r[0] for r in parsed})
    curves = []
    for cid in ids:
        block = np.array([r[1:] for r in parsed if r[0] == cid], dtype=float)
        curves.append(Curve(block[:, :-1], block[:, -1]))
    return Dataset(curves), ids


def read_query(path):
    """Query CSV with columns ``curve_id, x_1..x_p``; may have no rows."""
    header, xs, rows = _read_table(path, "x_")
    parsed = _parse_rows(path, header, ["curve_id", *xs], rows)
    ids = np.array([r[0] for r in parsed], dtype=int)
    U = np.array([r[1:] for r in parsed], dtype=float).reshape(len(parsed), len(xs))
    return ids, U


def load_config(path):
    """Parse and schema-validate a run configuration."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise FormatError(f"{path}: at {where}: {exc.message}") from None
    return cfg


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of a parsed configuration."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# objects <-> JSON -------------------------------------------------------
def kernel_to_json(kernel):
    terms = []
    for t in kernel.terms:
        d = {"family": t.family, "params": [float(v) for v in t.params]}
        if t.family == "MATERN":
            d["order"] = float(t.order)
        terms.append(d)
    return {"input_dim": kernel.input_dim, "terms": terms}


def kernel_from_json(d, input_dim=None):
    p = d.get("input_dim", input_dim or 1)
    if input_dim is not None and p != input_dim:
        raise InvalidOptions(f"kernel input_dim {p} does not match data dimension {input_dim}")
    try:
        terms = tuple(
            KernelTerm(t["family"], tuple(t["params"]), t.get("order", 1.5)) for t in d["terms"]
        )
        return KernelConfig(terms, p)
    except (TypeError, ValueError) as exc:
        raise InvalidOptions(f"invalid kernel: {exc}") from None


def fit_options_from_json(d, seed=None):
    d = dict(d or {})
    if seed is not None:
        d["seed"] = seed
    return FitOptions(**d)


def scenario_from_json(d, seed=None):
    d = dict(d)
    if "design" in d:
        d["design"] = Design(**d["design"])
    if "contamination" in d:
        d["contamination"] = tuple(
            Contamination(**{**c, **({"start_range": tuple(c["start_range"])} if "start_range" in c else {})})
            for c in d["contamination"]
        )
    d["theta_true"] = tuple(d["theta_true"])
    if seed is not None:
        d["seed"] = seed
    return ScenarioConfig(**d)


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return None
    return x


def _options_json(o):
    return {
        "mode": o.mode,
        "nu": o.nu,
        "max_iterations": o.max_iterations,
        "gradient_tolerance": o.gradient_tolerance,
        "restarts": o.restarts,
        "seed": o.seed,
        "tied": o.tied,
        **({"phi0": o.phi0} if o.phi0 is not None else {}),
    }


def model_to_json(model, curve_ids=None):
    """Serialisable dict for a :class:`FittedModel` (natural-scale values)."""
    p = model.params
    data = model.data
    ids = list(range(data.m)) if curve_ids is None else [int(c) for c in curve_ids]
    return {
        "schema_version": SCHEMA_VERSION,
        "mode": "gpr" if p.gpr else "etpr",
        "nu": _num(p.nu),
        "nu_policy": "estimate" if model.options.estimate_nu else "fixed",
        "tied": p.tied,
        "phi": p.phi,
        "kernels": [kernel_to_json(k) for k in p.kernels],
        "beta_names": p.beta_names(),
        "beta": [float(v) for v in p.beta],
        "std_errors": None if model.std_errors is None else [_num(v) for v in model.std_errors],
        "nu_std_error": _num(model.nu_std_error),
        "log_likelihood": model.log_likelihood,
        "converged": model.converged,
        "final_gradient_norm": _num(model.final_gradient_norm),
        "iterations": model.iterations,
        "fit_options": _options_json(model.options),
        "curve_ids": ids,
        "data": {
            "input_dim": data.p,
            "curves": [{"X": c.X.tolist(), "y": c.y.tolist()} for c in data.curves],
        },
    }


def model_from_json(d):
    """Rebuild a :class:`FittedModel`; caches are recomputed from the data."""
    if d.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported model schema version {d.get('schema_version')!r}")
    try:
        curves = [Curve(np.array(c["X"], dtype=float), np.array(c["y"], dtype=float)) for c in d["data"]["curves"]]
        data = Dataset(curves)
        kernels = tuple(kernel_from_json(k) for k in d["kernels"])
        nu = math.inf if d["nu"] == "inf" else float(d["nu"])
        params = ModelParams(float(d["phi"]), kernels, nu, bool(d["tied"]))
        opts = FitOptions(**d["fit_options"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model file: {exc}") from None
    se = d.get("std_errors")
    model = rebuild(
        data,
        params,
        log_likelihood=float(d["log_likelihood"]),
        converged=bool(d["converged"]),
        final_gradient_norm=float(d["final_gradient_norm"]) if d.get("final_gradient_norm") is not None else float("nan"),
        std_errors=None if se is None else np.array([np.nan if v is None else float(v) for v in se]),
        options=opts,
        nu_std_error=d.get("nu_std_error"),
        iterations=int(d.get("iterations", 0)),
    )
    return model, list(d.get("curve_ids", range(data.m)))
