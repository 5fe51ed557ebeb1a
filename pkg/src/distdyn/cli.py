"""Command-line entry point: ``distdyn {simulate,fit,test,ingest,eval-density}``.

Configuration comes from an optional TOML file with sections ``[fit]``,
``[ode]``, ``[simulate]``, ``[window]``, ``[cohort]`` and ``[inference]``;
command-line flags override file values. Exit codes: 0 success, 1 runtime
failure, 2 configuration or validation error (a JSON error object is printed
on stderr).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from .core import (InputError, NumericalError, ParseError, dataset_from_dict, deserialize_model,
                   mixture_density, serialize_model)

SECTIONS = ("fit", "ode", "simulate", "window", "cohort", "inference")
TRAJECTORY_POINTS = 200


class ConfigError(InputError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclasses.dataclass(frozen=True)
class InferenceSettings:
    B: int = 1000
    method: str = "wild"
    level: float = 0.05
    probs: tuple = (0.25, 0.5, 0.75)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if self.method not in ("wild", "permutation"):
            raise InputError("method must be 'wild' or 'permutation'")
        if int(self.B) != self.B or self.B < 100:
            raise InputError("B must be an integer >= 100")
        if not 0 < self.level < 1:
            raise InputError("level must lie in (0, 1)")
        if any(not 0 < p < 1 for p in self.probs):
            raise InputError("probs must lie in (0, 1)")


def _section_types():
    from .cohort import CohortConfig
    from .ingest import WindowSpec
    from .mmd_fit import FitConfig
    from .ode_smooth import OdeConfig
    from .simulate import DgpSpec

    return {"fit": FitConfig, "ode": OdeConfig, "simulate": DgpSpec, "window": WindowSpec,
            "cohort": CohortConfig, "inference": InferenceSettings}


# ---------------------------------------------------------------------------
# configuration

def load_config_file(path) -> dict:
    import tomli

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", "config")
    try:
        doc = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {p}: {exc}", "config") from None
    for key, value in doc.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table", key)
        elif key not in ("seed", "threads"):
            raise ConfigError(f"unknown config key {key!r}", key)
    return doc


def build_section(name: str, values: dict):
    cls = _section_types()[name]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{name}] unknown field(s): {', '.join(unknown)}", f"{name}.{unknown[0]}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except InputError as exc:
        raise ConfigError(f"[{name}] {exc}", name) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] invalid value: {exc}", name) from None


def resolve_config(args) -> tuple[dict, dict]:
    """Merge file values, flag overrides and the global seed.

    Returns (typed sections, plain dict for the echo file).
    """
    doc = load_config_file(args.config) if args.config else {}
    raw = {s: dict(doc.get(s, {})) for s in SECTIONS}
    seed = doc.get("seed", 0)
    if args.seed is not None:
        seed = args.seed
    for s in ("fit", "ode", "simulate", "inference"):
        if args.seed is not None or "seed" not in raw[s]:
            raw[s]["seed"] = seed
    for (section, key), value in getattr(args, "overrides", {}).items():
        if value is not None:
            raw[section][key] = value
    typed = {s: build_section(s, raw[s]) for s in SECTIONS}
    threads = args.threads if args.threads is not None else doc.get("threads", os.cpu_count() or 1)
    if int(threads) != threads or threads < 1:
        raise ConfigError("threads must be a positive integer", "threads")
    typed["threads"] = int(threads)
    echo = {"seed": int(seed), "threads": int(threads), "command": args.command}
    for s in SECTIONS:
        echo[s] = {k: _plain(v) for k, v in dataclasses.asdict(typed[s]).items()}
    return typed, echo


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_config_echo(echo: dict, out: Path) -> Path:
    import tomli_w

    def clean(d):
        return {k: (clean(v) if isinstance(v, dict) else v) for k, v in d.items() if v is not None}

    path = out / "config_echo.toml"
    path.write_text(tomli_w.dumps(clean(echo)))
    return path


# ---------------------------------------------------------------------------
# CSV helpers

def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def validate_csv(path: Path, header, numeric=()) -> int:
    """Check the header and numeric columns of an emitted CSV; returns the row count."""
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or tuple(got) != tuple(header):
            raise RuntimeError(f"self-validation failed for {path.name}: header {got}")
        idx = [list(header).index(c) for c in numeric]
        n = 0
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise RuntimeError(f"self-validation failed for {path.name}: row {line}")
            for i in idx:
                v = float(row[i])
                if np.isinf(v):
                    raise RuntimeError(f"self-validation failed for {path.name}: row {line}")
            n += 1
    return n


# Single-dataset schemas; cohort files prepend a subject (or scope) column.
WEIGHTS_HEADER = ("time", "component", "weight")
SINGLE_TRAJ_HEADER = ("time", "component", "weight")
TRACE_HEADER = ("outer_iter", "total_objective")
ODE_LOSS_HEADER = ("epoch", "loss")
COHORT_WEIGHTS_HEADER = ("subject_id",) + WEIGHTS_HEADER
COHORT_TRACE_HEADER = ("scope",) + TRACE_HEADER
COHORT_ODE_LOSS_HEADER = ("subject_id",) + ODE_LOSS_HEADER


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: dict, out: Path, args) -> dict:
    from .simulate import read_benchmark_csv, run_benchmark, summarize

    spec = cfg["simulate"]
    if args.smoke:
        spec = dataclasses.replace(spec, replicates=2, sample_sizes=(20,))
    rows = run_benchmark(spec, cfg["fit"], cfg["ode"], out / "benchmark.csv", cfg["threads"])
    summary = summarize(rows)
    cols = ("method", "d", "n", "t", "replicates", "mean_l2", "median_l2")
    _write_csv(out / "summary.csv", cols, ([r[c] for c in cols] for r in summary))
    read_benchmark_csv(out / "benchmark.csv")
    validate_csv(out / "summary.csv", cols, ("t", "mean_l2", "median_l2"))
    failed = sum(r["status"] != "ok" for r in rows)
    return {"rows": len(rows), "failed_rows": failed, "summary": str(out / "summary.csv")}


def _load_dataset(path):
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"dataset not found: {p}", "dataset") from None
    except json.JSONDecodeError as exc:
        raise ParseError("dataset", f"invalid JSON: {exc}") from None
    return dataset_from_dict(doc)


def _fit_single(cfg, out: Path, dataset) -> dict:
    from .mmd_fit import fit
    from .ode_smooth import predict_weights, train

    fit_cfg, ode_cfg = cfg["fit"], cfg["ode"]
    pooled_n = sum(dataset.sizes)
    if fit_cfg.K > pooled_n:
        raise ConfigError(f"fit.K={fit_cfg.K} exceeds the pooled sample size {pooled_n}", "fit.K")
    result = fit(dataset, fit_cfg)
    trained = train(result.model.weight_table, ode_cfg)
    model = dataclasses.replace(result.model, ode=trained.model)
    (out / "model.json").write_bytes(serialize_model(model))
    table = model.weight_table
    times = table.grid.normalized * ode_cfg.T
    _write_csv(out / "weights.csv", WEIGHTS_HEADER,
               ([t, k, w] for t, row in zip(times, table.rows)
                for k, w in enumerate(row)))
    dense = np.linspace(0.0, ode_cfg.T, TRAJECTORY_POINTS)
    traj = predict_weights(trained.model, dense)
    _write_csv(out / "trajectories.csv", SINGLE_TRAJ_HEADER,
               ([t, k, w] for t, row in zip(dense, traj) for k, w in enumerate(row)))
    _write_csv(out / "objective_trace.csv", TRACE_HEADER,
               ([i, v] for i, v in enumerate(result.objective_trace)))
    _write_csv(out / "ode_loss.csv", ODE_LOSS_HEADER,
               ([e, v] for e, v in enumerate(trained.loss_trace)))
    # post-training contract: grid-point reproduction
    at_grid = predict_weights(trained.model, times)
    repro = float(np.max(np.linalg.norm(at_grid - table.rows, axis=1)))
    back = deserialize_model((out / "model.json").read_bytes())
    validate_csv(out / "weights.csv", WEIGHTS_HEADER, ("time", "weight"))
    validate_csv(out / "trajectories.csv", SINGLE_TRAJ_HEADER, ("time", "weight"))
    validate_csv(out / "objective_trace.csv", TRACE_HEADER, ("total_objective",))
    validate_csv(out / "ode_loss.csv", ODE_LOSS_HEADER, ("loss",))
    return {"mode": "single", "K": back.dictionary.size, "grid_points": len(table.grid),
            "final_objective": result.objective_trace[-1], "ode_best_loss": trained.best_loss,
            "grid_reproduction_max_l2": repro, "grid_reproduction_ok": repro <= 0.05}


def _fit_cohort(cfg, out: Path, datasets: dict, arms: dict) -> dict:
    from .cohort import TRAJECTORY_COLUMNS, fit_cohort, write_trajectories_csv
    from .ingest import _safe_name

    if not datasets:
        raise ConfigError("cohort contains no subject with valid windows", "cohort")
    fitted = fit_cohort(datasets, arms, cfg["fit"], cfg["ode"], cfg["cohort"])
    (out / "models").mkdir(exist_ok=True)
    for sid, model in fitted.models.items():
        (out / "models" / f"{_safe_name(sid)}.json").write_bytes(serialize_model(model))
    T = cfg["ode"].T
    _write_csv(out / "weights.csv", COHORT_WEIGHTS_HEADER,
               ([sid, t, k, w] for sid, m in fitted.models.items()
                for t, row in zip(m.weight_table.grid.normalized * T, m.weight_table.rows)
                for k, w in enumerate(row)))
    write_trajectories_csv(fitted, out / "trajectories.csv")
    if cfg["cohort"].dictionary_mode == "pooled":
        traces = [("reference", fitted.objective_trace)]
    else:
        traces = list(zip(fitted.models, fitted.objective_trace))
    _write_csv(out / "objective_trace.csv", COHORT_TRACE_HEADER,
               ([scope, i, v] for scope, tr in traces for i, v in enumerate(tr)))
    _write_csv(out / "ode_loss.csv", COHORT_ODE_LOSS_HEADER,
               ([sid, e, v] for sid, tr in fitted.ode_losses.items() for e, v in enumerate(tr)))
    validate_csv(out / "weights.csv", COHORT_WEIGHTS_HEADER, ("time", "weight"))
    validate_csv(out / "trajectories.csv", TRAJECTORY_COLUMNS, ("time", "weight"))
    validate_csv(out / "objective_trace.csv", COHORT_TRACE_HEADER, ("total_objective",))
    validate_csv(out / "ode_loss.csv", COHORT_ODE_LOSS_HEADER, ("loss",))
    from .ode_smooth import predict_weights
    repro = {}
    for sid, m in fitted.models.items():
        at_grid = predict_weights(m.ode, m.weight_table.grid.normalized * T)
        repro[sid] = float(np.max(np.linalg.norm(at_grid - m.weight_table.rows, axis=1)))
    return {"mode": "cohort", "subjects": len(fitted.models),
            "dictionary_mode": cfg["cohort"].dictionary_mode,
            "arms": sorted(set(arms.values())),
            "grid_reproduction_max_l2": max(repro.values()),
            "grid_reproduction_ok_fraction": float(np.mean([v <= 0.05 for v in repro.values()]))}


def cmd_fit(cfg: dict, out: Path, args) -> dict:
    sources = [s for s in (args.dataset, args.cohort, args.cgm) if s]
    if len(sources) + (args.dgp is not None) != 1:
        raise ConfigError("give exactly one of --dataset, --cohort, --cgm or --dgp", "input")
    if args.dataset:
        return _fit_single(cfg, out, _load_dataset(args.dataset))
    if args.dgp is not None:
        from .simulate import simulate_dataset
        if args.dgp < 2:
            raise ConfigError("--dgp sample size must be >= 2", "dgp")
        spec = cfg["simulate"]
        dataset = simulate_dataset(spec, args.dgp, np.random.SeedSequence([spec.seed, args.dgp]))
        return _fit_single(cfg, out, dataset)
    if args.cohort:
        from .ingest import read_cohort
        p = Path(args.cohort)
        p = p / "manifest.json" if p.is_dir() else p
        if not p.is_file():
            raise ConfigError(f"cohort manifest not found: {p}", "cohort")
        datasets, arms, _ = read_cohort(p)
        return _fit_cohort(cfg, out, datasets, arms)
    cohort = _ingest(cfg, out, args.cgm, args.mode)
    return _fit_cohort(cfg, out, cohort.datasets, cohort.arms)


def _ingest(cfg, out: Path, path, mode):
    from .ingest import parse_cgm_csv, windowize, write_cohort

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input CSV not found: {p}", "input")
    cohort = windowize(parse_cgm_csv(p), cfg["window"], mode)
    if not cohort.audit():
        raise RuntimeError("conservation audit failed during windowing")
    write_cohort(cohort, out / "cohort")
    return cohort


def cmd_ingest(cfg: dict, out: Path, args) -> dict:
    cohort = _ingest(cfg, out, args.input, args.mode)
    reports = cohort.reports
    return {"subjects": len(reports), "kept_subjects": len(cohort.datasets),
            "excluded_subjects": [r.subject_id for r in reports if r.status != "ok"],
            "manifest": str(out / "cohort" / "manifest.json"), "audit_ok": cohort.audit()}


def cmd_test(cfg: dict, out: Path, args) -> dict:
    from .cohort import read_trajectories_csv
    from .inference import (QUANTILE_COLUMNS, centered_quantile_curves,
                            check_compatible, pvalue_curves, read_pvalue_csv,
                            rejection_fraction, write_pvalue_csv, write_quantile_csv)

    p = Path(args.trajectories)
    if not p.is_file():
        raise ConfigError(f"trajectories CSV not found: {p}", "trajectories")
    arms = read_trajectories_csv(p)
    labels = args.arms.split(",") if args.arms else sorted(arms)
    if len(labels) != 2 or any(a not in arms for a in labels):
        raise ConfigError(f"need exactly two arms, found {sorted(arms)}", "arms")
    a0, a1 = arms[labels[0]], arms[labels[1]]
    check_compatible(a0, a1)
    inf = cfg["inference"]
    results = pvalue_curves(a0, a1, inf.B, inf.method, inf.seed, cfg["threads"])
    write_pvalue_csv(results, out / "inference.csv")
    curves = {lab: centered_quantile_curves(arms[lab], inf.probs) for lab in labels}
    write_quantile_csv(curves, a0.times, inf.probs, out / "quantiles.csv")
    read_pvalue_csv(out / "inference.csv")
    validate_csv(out / "quantiles.csv", ("arm",) + QUANTILE_COLUMNS, ("time", "prob", "value"))
    frac = rejection_fraction(results, inf.level)
    return {"arms": labels, "cells": a0.K * a0.times.size, "level": inf.level,
            "rejection_fraction": frac,
            "null_calibration_band": [0.02, 0.09],
            "within_null_band": bool(0.02 <= frac <= 0.09)}


def _parse_grid(specs, d):
    if len(specs) != d:
        raise ConfigError(f"--grid needs one lo:hi:n spec per dimension ({d})", "grid")
    axes = []
    for s in specs:
        try:
            lo, hi, n = s.split(":")
            axes.append(np.linspace(float(lo), float(hi), int(n)))
        except ValueError:
            raise ConfigError(f"bad --grid spec {s!r}; expected lo:hi:n", "grid") from None
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _weights_at(model, t: float) -> np.ndarray:
    from .ode_smooth import predict_weights

    if model.ode is not None:
        return predict_weights(model.ode, [t])[0]
    grid = model.weight_table.grid.normalized
    if t < grid[0] - 1e-12 or t > grid[-1] + 1e-12:
        raise ConfigError(f"time {t} outside the fitted grid", "time")
    j = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))
    lam = (t - grid[j]) / (grid[j + 1] - grid[j])
    rows = model.weight_table.rows
    return (1 - lam) * rows[j] + lam * rows[j + 1]


def cmd_eval_density(cfg: dict, out: Path, args) -> dict:
    p = Path(args.model)
    if not p.is_file():
        raise ConfigError(f"model file not found: {p}", "model")
    model = deserialize_model(p.read_bytes())
    d = model.dictionary.dimension
    if args.points:
        pts = np.loadtxt(args.points, delimiter=",", ndmin=2)
        if pts.shape[1] != d:
            raise ConfigError(f"points file must have {d} columns", "points")
    elif args.grid:
        pts = _parse_grid(args.grid, d)
    else:
        raise ConfigError("give --points or --grid", "points")
    header = ("time",) + tuple(f"x{i}" for i in range(d)) + ("density",)
    rows = []
    for t in args.time:
        alpha = _weights_at(model, float(t))
        dens = np.atleast_1d(mixture_density(model.dictionary, alpha, pts))
        rows.extend([float(t), *map(float, x), float(v)] for x, v in zip(pts, dens))
    _write_csv(out / "density.csv", header, rows)
    validate_csv(out / "density.csv", header, header)
    return {"points": int(pts.shape[0]), "times": [float(t) for t in args.time]}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "test": cmd_test, "ingest": cmd_ingest,
            "eval-density": cmd_eval_density}


# ---------------------------------------------------------------------------
# argument parsing

def _int_list(s: str):
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "arguments")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, help="maximum parallel workers")
    common.add_argument("--out", default="out", help="output directory")
    parser = _Parser(prog="distdyn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", parents=[common], help="run the synthetic benchmark")
    sim.add_argument("--smoke", action="store_true", help="2 replicates at n=20")
    sim.add_argument("--d", type=int, dest="sim_d")
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--sample-sizes", type=_int_list)

    fitp = sub.add_parser("fit", parents=[common], help="fit a dataset or a cohort")
    fitp.add_argument("--dataset", help="SnapshotDataset JSON file")
    fitp.add_argument("--cohort", help="ingest output directory or manifest.json")
    fitp.add_argument("--cgm", help="raw CGM CSV (ingested on the fly)")
    fitp.add_argument("--dgp", type=int, metavar="N", help="simulate a DGP dataset of size N")
    fitp.add_argument("--mode", choices=("univariate", "bivariate"), default="bivariate")
    fitp.add_argument("--K", type=int)
    fitp.add_argument("--epochs", type=int)
    fitp.add_argument("--outer-iterations", type=int)
    fitp.add_argument("--dictionary-mode", choices=("pooled", "per-subject"))
    fitp.add_argument("--reference", choices=("first", "all"))

    testp = sub.add_parser("test", parents=[common], help="two-arm p-value curves")
    testp.add_argument("--trajectories", required=True, help="cohort trajectories CSV")
    testp.add_argument("--arms", help="comma-separated arm labels (arm0,arm1)")
    testp.add_argument("--B", type=int)
    testp.add_argument("--method", choices=("wild", "permutation"))

    ing = sub.add_parser("ingest", parents=[common], help="window a CGM CSV into datasets")
    ing.add_argument("--input", required=True)
    ing.add_argument("--mode", choices=("univariate", "bivariate"), default="bivariate")
    ing.add_argument("--window-days", type=float)
    ing.add_argument("--min-count", type=int)

    ev = sub.add_parser("eval-density", parents=[common], help="evaluate a fitted density")
    ev.add_argument("--model", required=True)
    ev.add_argument("--time", type=float, nargs="+", required=True)
    ev.add_argument("--points", help="CSV of evaluation points (one column per dimension)")
    ev.add_argument("--grid", nargs="+", help="lo:hi:n per dimension")
    # let values such as -5:25:31 through as arguments rather than options
    ev._negative_number_matcher = re.compile(r"^-\d+$|^-\d*\.\d+$|^-[\d.]+:")
    return parser


def _overrides(args) -> dict:
    pairs = {
        ("simulate", "d"): "sim_d", ("simulate", "replicates"): "replicates",
        ("simulate", "sample_sizes"): "sample_sizes", ("fit", "K"): "K",
        ("ode", "epochs"): "epochs", ("fit", "outer_iterations"): "outer_iterations",
        ("cohort", "dictionary_mode"): "dictionary_mode", ("cohort", "reference"): "reference",
        ("inference", "B"): "B", ("inference", "method"): "method",
        ("window", "window_days"): "window_days", ("window", "min_count"): "min_count",
    }
    return {k: getattr(args, a, None) for k, a in pairs.items()}


def _error(kind: str, exc: BaseException, code: int) -> int:
    doc = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    field = getattr(exc, "field", None) or getattr(exc, "path", None)
    if field:
        doc["field"] = field
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.overrides = _overrides(args)
        cfg, echo = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (InputError, OSError) as exc:
        return _error("config", exc, 2)
    try:
        report = COMMANDS[args.command](cfg, out, args)
        write_config_echo(echo, out)
    except InputError as exc:
        return _error("validation", exc, 2)
    except (NumericalError, RuntimeError, OSError, ValueError, ArithmeticError) as exc:
        return _error("runtime", exc, 1)
    report = {"command": args.command, "out": str(out), **report}
    print(json.dumps(report, default=_plain, indent=2))
    return 0


def main_exit():  # console-script wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
