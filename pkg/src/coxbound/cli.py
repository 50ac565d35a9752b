"""Command-line interface: ``coxbound {bound,sweep,table1,validate}``.

Configs are JSON documents with ``schema_version`` 1 and exactly one model
block:

``case_cohort``
    :class:`~coxbound.designs.CaseCohortSpec` fields plus optional ``phase1``.
``stratified``
    :class:`~coxbound.designs.StratifiedSpec` fields (or ``rule``/``total``
    instead of ``pi0``/``pi1``) plus optional ``phase1``.
``model`` and ``design``
    A raw :class:`~coxbound.model_core.FullDataModel` and
    :class:`~coxbound.model_core.MissingnessDesign` (see :func:`parse_model`).

``sweep`` and ``table1`` use their own blocks instead.  Command-line flags
override the matching config entries.  Exit codes: 0 success, 1 validation
failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .designs import (
    SWEEP_COLUMNS,
    TABLE1_PX1,
    TABLE1_THETAS,
    CaseCohortSpec,
    StratifiedSpec,
    case_cohort_model,
    run_sweep,
    stratified_allocated,
    stratified_model,
    table1,
)
from .model_core import (
    CensoringSpec,
    CovariateLevel,
    FullDataModel,
    MissingnessDesign,
    ModelError,
    PiecewiseHazard,
    build_observed_tables,
    design_tables,
    make_grid,
)
from .score_solver import ROUTES, NumericError, compute_bound
from .validate_mc import SE_BAND, SeedSpec, operator_checks, run_validation

__all__ = ["main", "ConfigError", "load_config", "parse_model", "format_float",
           "cmd_bound", "cmd_sweep", "cmd_table1", "cmd_validate"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("bound", "sweep", "table1", "validate")
MODEL_BLOCKS = ("case_cohort", "stratified", "model")
DEFAULT_SEED = 20040601


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


# ---------------------------------------------------------------------------
# serialisation


def format_float(x) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(float(x), ".17g")


def _json_value(x) -> str:
    if x is None:
        return "null"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format_float(x) if math.isfinite(x) else "null"
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_json_value(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_json_value(v) for v in x) + "]"
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dumps(doc) -> str:
    """JSON text with floats printed at 17 significant digits."""
    return _json_value(doc) + "\n"


def _csv_cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return format_float(x) if math.isfinite(x) else "nan"
    return str(x)


def to_csv(columns: list, rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_csv_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _emit(text: str, out: str | None):
    """Write ``text`` atomically to ``out``, or to stdout."""
    if out is None:
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(out))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".coxbound-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, out)


# ---------------------------------------------------------------------------
# config parsing


def load_config(path: str | None) -> dict:
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    return cfg


def _require(block, keys, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    missing = [k for k in keys if k not in block]
    if missing:
        raise ConfigError(f"{where} lacks {missing}")


def _hazard(block, where) -> PiecewiseHazard:
    if isinstance(block, (int, float)):
        return PiecewiseHazard.constant(float(block))
    _require(block, ("knots", "rates"), where)
    return PiecewiseHazard(tuple(block["knots"]), tuple(block["rates"]))


def parse_model(model_block: dict, design_block: dict) -> tuple[FullDataModel, MissingnessDesign]:
    """Raw model and design blocks.

    ``model``: ``theta`` (list), ``levels`` (list of ``{"x": [...], "v": [...]}``),
    ``pmf``, ``baseline`` (rate or ``{"knots", "rates"}``), ``tau``,
    ``censoring`` (one ``{"atoms": [[t, p], ...], "hazard": ...}`` per level, or
    a single object shared by all levels) and optional ``coefficient_scope``.

    ``design``: either ``{"pi_failure", "pi_censored"}`` or
    ``{"probs", "breaks", "v_values"}``, plus optional ``phase1``.
    """
    _require(model_block, ("theta", "levels", "pmf", "baseline", "tau", "censoring"), "model")
    levels = []
    for i, lv in enumerate(model_block["levels"]):
        _require(lv, ("x",), f"model.levels[{i}]")
        levels.append(CovariateLevel(tuple(lv["x"]), tuple(lv.get("v", ()))))
    cens_in = model_block["censoring"]
    if isinstance(cens_in, dict):
        cens_in = [cens_in] * len(levels)
    if len(cens_in) != len(levels):
        raise ConfigError("need one censoring block per level")
    cens = []
    for i, c in enumerate(cens_in):
        _require(c, ("atoms",), f"model.censoring[{i}]")
        hz = c.get("hazard")
        cens.append(CensoringSpec(tuple(tuple(a) for a in c["atoms"]),
                                  None if hz is None else _hazard(hz, "censoring hazard")))
    model = FullDataModel(tuple(model_block["theta"]), tuple(levels), tuple(model_block["pmf"]),
                          _hazard(model_block["baseline"], "model.baseline"), tuple(cens),
                          model_block["tau"], model_block.get("coefficient_scope", "z"))
    phase1 = design_block.get("phase1", "YDV") if isinstance(design_block, dict) else "YDV"
    if isinstance(design_block, dict) and "pi_failure" in design_block:
        design = MissingnessDesign.by_delta(design_block["pi_failure"], design_block["pi_censored"],
                                            phase1=phase1)
    else:
        _require(design_block, ("probs",), "design")
        vv = design_block.get("v_values")
        design = MissingnessDesign(np.asarray(design_block["probs"], dtype=float),
                                   tuple(design_block.get("breaks", ())),
                                   None if vv is None else tuple(tuple(v) for v in vv), phase1)
    return model, design


def model_from_config(cfg: dict) -> tuple[FullDataModel, MissingnessDesign, object]:
    """``(model, design, spec)`` from the single model block; ``spec`` may be None."""
    try:
        return _model_from_config(cfg)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad model block: {exc}") from None


def _model_from_config(cfg: dict):
    present = [k for k in MODEL_BLOCKS if k in cfg]
    if len(present) != 1:
        raise ConfigError(f"exactly one of {MODEL_BLOCKS} is required, got {present}")
    kind = present[0]
    block = dict(cfg[kind]) if isinstance(cfg[kind], dict) else cfg[kind]
    if kind == "model":
        if "design" not in cfg:
            raise ConfigError("a raw model needs a design block")
        m, d = parse_model(block, cfg["design"])
        return m, d, None
    if not isinstance(block, dict):
        raise ConfigError(f"{kind} must be an object")
    phase1 = block.pop("phase1", "YDV")
    if kind == "case_cohort":
        spec = CaseCohortSpec(**block)
        m, d = case_cohort_model(spec, phase1)
        return m, d, spec
    if "rule" in block:
        rule = block.pop("rule")
        total = block.pop("total", None)
        spec = stratified_allocated(rule=rule, total=total, **block)
    else:
        spec = StratifiedSpec(**block)
    m, d = stratified_model(spec, phase1)
    return m, d, spec


def _grid_opts(cfg: dict, args) -> dict:
    g = cfg.get("grid", {})
    if not isinstance(g, dict):
        raise ConfigError("grid must be an object")
    n = args.grid_n if args.grid_n is not None else g.get("n", 400)
    if not isinstance(n, int) or n < 2:
        raise ConfigError("grid.n must be an integer >= 2")
    return {"n": n, "refine": bool(g.get("refine", True)), "rtol": float(g.get("rtol", 1e-4)),
            "max_nodes": int(g.get("max_nodes", 6400))}


def _route(cfg: dict, args) -> str:
    r = args.route if args.route is not None else cfg.get("route", "T")
    if r not in ROUTES + ("both",):
        raise ConfigError(f"route must be one of T, K, both; got {r!r}")
    return r


def _seed(cfg: dict, args) -> int:
    s = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    if not isinstance(s, int) or s < 0 or s >= 2 ** 64:
        raise ConfigError("seed must be a 64-bit nonnegative integer")
    return s


def _threads(cfg: dict, args) -> int:
    t = args.threads if args.threads is not None else cfg.get("threads", 1)
    if not isinstance(t, int) or t < 1:
        raise ConfigError("threads must be a positive integer")
    return t


# ---------------------------------------------------------------------------
# commands


def _bound_doc(model, design, grid: dict, route: str) -> dict:
    res = compute_bound(model, design, n=grid["n"], route=route, refine=grid["refine"],
                        rtol=grid["rtol"], max_nodes=grid["max_nodes"])
    sol = res.solution
    u = sol.u_star[..., 0]
    probe = np.linspace(0.1, 1.0, 10) * model.tau
    cells = sol.tables.grid.cell_of(probe)
    return {
        "route": route,
        "variant": sol.variant.tag,
        "n_cells": sol.n_cells,
        "I_star": res.I_star.tolist(),
        "I_full": res.I_full.tolist(),
        "are_ib": res.are.tolist(),
        "residual": sol.residual,
        "condition": sol.condition,
        "converged": res.converged,
        "trail": [{"n_cells": n, "I_star_diag": d} for n, d in res.trail],
        "u_star": {"t": probe.tolist(), "values": u[:, cells].tolist(),
                   "min": float(u.min()), "max": float(u.max())},
    }


def cmd_bound(cfg: dict, args) -> tuple[str, int]:
    model, design, _ = model_from_config(cfg)
    grid = _grid_opts(cfg, args)
    route = _route(cfg, args)
    if route == "both":
        docs = {r: _bound_doc(model, design, grid, r) for r in ROUTES}
        gap = max(abs(a - b) for a, b in zip(np.ravel(docs["T"]["I_star"]),
                                              np.ravel(docs["K"]["I_star"])))
        doc = {"schema_version": SCHEMA_VERSION, "command": "bound", "routes": docs,
               "route_gap_I_star": gap}
    else:
        doc = {"schema_version": SCHEMA_VERSION, "command": "bound",
               **_bound_doc(model, design, grid, route)}
    return dumps(doc), EXIT_OK


def _sweep_points(block: dict) -> list[dict]:
    if "points" in block:
        pts = block["points"]
        if not isinstance(pts, list) or not all(isinstance(p, dict) for p in pts):
            raise ConfigError("sweep.points must be a list of objects")
        return [dict(p) for p in pts]
    if "grid" in block:
        g = block["grid"]
        base = dict(block.get("fixed", {}))
        if not isinstance(g, dict) or not all(isinstance(v, list) for v in g.values()):
            raise ConfigError("sweep.grid must map names to lists")
        keys = list(g)
        return [{**base, **dict(zip(keys, combo))} for combo in itertools.product(*g.values())]
    raise ConfigError("sweep needs points or grid")


def _check_sweep_points(kind: str, points: list[dict]):
    """Reject unknown fields before any computation."""
    if kind == "case_cohort":
        allowed = {"p0", "theta", "pi0", "h1"}
    else:
        allowed = {"theta", "p_x0", "alpha", "beta", "pi0", "pi1", "p0", "lam", "rule", "total"}
    for p in points:
        extra = set(p) - allowed
        if extra:
            raise ConfigError(f"unknown sweep fields {sorted(extra)}")


def cmd_sweep(cfg: dict, args) -> tuple[str, int]:
    block = cfg.get("sweep")
    _require(block, ("kind",), "sweep")
    kind = block["kind"]
    if kind not in ("case_cohort", "stratified"):
        raise ConfigError("sweep.kind must be case_cohort or stratified")
    points = _sweep_points(block)
    if not points:
        raise ConfigError("sweep has no points")
    _check_sweep_points(kind, points)
    grid = _grid_opts(cfg, args)
    route = _route(cfg, args)
    if route == "both":
        raise ConfigError("sweep takes a single route")
    rep = run_sweep(kind, points, n=grid["n"], route=route,
                    with_sp=bool(block.get("with_sp", False)), threads=_threads(cfg, args),
                    refine=grid["refine"])
    names = []
    for p in points:
        names += [k for k in p if k not in names]
    rows = [{**r.params, **{c: getattr(r, c) for c in SWEEP_COLUMNS}} for r in rep.rows]
    code = EXIT_NUMERIC if rep.all_failed else EXIT_OK
    return to_csv(names + list(SWEEP_COLUMNS), rows), code


TABLE1_COLUMNS = ("theta", "lam", "p_x1", "sensitivity", "specificity", "pi0", "pi1",
                  "are_ib_pct", "are_pl_pct", "ratio_pct", "converged")


def cmd_table1(cfg: dict, args) -> tuple[str, int]:
    block = cfg.get("table1", {})
    if not isinstance(block, dict):
        raise ConfigError("table1 must be an object")
    thetas = block.get("thetas", list(TABLE1_THETAS))
    if not isinstance(thetas, list) or not all(isinstance(t, (int, float)) for t in thetas):
        raise ConfigError("table1.thetas must be a list of numbers")
    rule = block.get("rule", "equal-expected-counts")
    if rule not in ("equal-expected-counts", "proportional"):
        raise ConfigError("table1.rule must be equal-expected-counts or proportional")
    pl = block.get("pl_constants")
    if pl is not None:
        try:
            pl = {float(k): tuple(tuple(float(x) for x in row) for row in v) for k, v in pl.items()}
        except (TypeError, ValueError, AttributeError):
            raise ConfigError("table1.pl_constants must map p_x1 to a 3x3 array") from None
    grid = _grid_opts(cfg, args)
    route = _route(cfg, args)
    if route == "both":
        raise ConfigError("table1 takes a single route")
    rows = []
    for th in thetas:
        rows += table1(float(th), lam=float(block.get("lam", 0.01)),
                       p_x1_values=tuple(block.get("p_x1", TABLE1_PX1)), rule=rule,
                       n=grid["n"], route=route, refine=grid["refine"], pl_constants=pl)
    return to_csv(list(TABLE1_COLUMNS), rows), EXIT_OK


def cmd_validate(cfg: dict, args) -> tuple[str, int]:
    model, design, _ = model_from_config(cfg)
    block = cfg.get("validate", {})
    if not isinstance(block, dict):
        raise ConfigError("validate must be an object")
    n = int(block.get("n", 100_000))
    band = float(block.get("band", SE_BAND))
    tol = float(block.get("tolerance", 1e-8))
    n_fields = int(block.get("n_fields", 20))
    if n < 2 or band < 0 or tol < 0 or n_fields < 1:
        raise ConfigError("validate.n >= 2, band >= 0, tolerance >= 0 and n_fields >= 1 required")
    grid = _grid_opts(cfg, args)
    route = _route(cfg, args)
    if route == "both":
        raise ConfigError("validate takes a single route")
    seed = _seed(cfg, args)
    tables = build_observed_tables(model, make_grid(model, grid["n"], design))
    checks = operator_checks(tables, design_tables(design, tables), SeedSpec(seed, 1), n_fields, tol)
    checks += run_validation(model, design, n, SeedSpec(seed, 0), grid_n=grid["n"], band=band,
                             threads=_threads(cfg, args), route=route)
    passed = all(c.passed for c in checks)
    doc = {"schema_version": SCHEMA_VERSION, "command": "validate", "seed": seed, "n": n,
           "all_passed": passed, "checks": [c.as_dict() for c in checks]}
    return dumps(doc), EXIT_OK if passed else EXIT_VALIDATION


HANDLERS = {"bound": cmd_bound, "sweep": cmd_sweep, "table1": cmd_table1, "validate": cmd_validate}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coxbound",
                                description="Efficiency bounds for two-phase Cox model designs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--out", help="output path (default stdout)")
        s.add_argument("--grid-n", type=int, dest="grid_n", help="initial number of grid cells")
        s.add_argument("--seed", type=int, help="root seed")
        s.add_argument("--threads", type=int, help="worker threads")
        s.add_argument("--route", choices=("T", "K", "both"), help="solution route")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        cmd = cfg.get("command", args.command)
        if cmd != args.command:
            raise ConfigError(f"config is for {cmd!r}, not {args.command!r}")
        text, code = HANDLERS[args.command](cfg, args)
    except (ConfigError, ModelError) as exc:
        print(f"coxbound: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"coxbound: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(text, args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
