"""``itr`` command-line front end.

Usage::

    itr simulate|fit|decide|evaluate|cv|sweep --config run.json [--seed N]
        [--out DIR] [--method npats|pats|mle] [--threads N]

The config is one JSON document; flags override its fields. Relative paths
inside it are resolved against the config file's directory. Every command
writes ``report.json`` (config echo, seed, results, diagnostics, version),
which is byte-identical across reruns; wall-clock time goes to ``timing.json``.

Exit codes: 0 success, 2 config error, 3 data error, 4 convergence failure
(outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConvergenceError, DataError, ITRError
from .io import ingest_long_csv, write_long_csv
from .policy import (
    FittedITR,
    cross_validate,
    decide_many,
    evaluate,
    fit_itr,
    oriented_outcomes,
    uniform_policy_value,
)
from .signature import EstimationOptions
from .simulate import MissingnessSpec, SimScenario, oracle_decisions, simulate, true_alpha

logger = logging.getLogger("trajitr.cli")

COMMANDS = ("simulate", "fit", "decide", "evaluate", "cv", "sweep")
STOCHASTIC = {"simulate", "fit", "cv", "sweep"}
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4


class _Unconverged(Exception):
    """Raised after outputs are written when an estimate did not converge."""


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def load_config(path, overrides: dict | None = None) -> dict:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def _path(cfg: dict, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _seed(cfg: dict, command: str) -> int | None:
    seed = cfg.get("seed")
    if seed is None:
        if command in STOCHASTIC:
            raise ConfigError(f"'{command}' needs a seed (config 'seed' or --seed)")
        return None
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    return seed


def _scenario(cfg: dict, key: str = "scenario", seed: int | None = None) -> SimScenario:
    d = cfg.get(key)
    if d is None:
        raise ConfigError(f"config needs a '{key}' section")
    d = dict(d)
    if seed is not None:
        d["seed"] = seed
    try:
        return SimScenario.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad '{key}' section: {exc}") from None


def _options(cfg: dict, seed: int | None) -> EstimationOptions:
    d = dict(cfg.get("estimation") or {})
    if seed is not None:
        d.setdefault("seed", seed)
    try:
        return EstimationOptions.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad 'estimation' section: {exc}") from None


def _method(cfg: dict) -> str:
    method = str(cfg.get("method", "pats")).lower()
    if method not in ("npats", "pats", "mle"):
        raise ConfigError(f"method must be npats, pats or mle, got {method!r}")
    return method


def _dataset(cfg: dict, key: str = "data"):
    section = cfg.get(key)
    if not isinstance(section, dict) or "outcomes" not in section or "covariates" not in section:
        raise ConfigError(f"config needs '{key}' with 'outcomes' and 'covariates' paths")
    paths = {k: _path(cfg, v) for k, v in section.items() if v is not None}
    for name, p in paths.items():
        if not p.exists():
            raise ConfigError(f"{key}.{name}: file not found: {p}")
    return ingest_long_csv(paths["outcomes"], paths["covariates"], paths.get("potential"))


def _load_itr(cfg: dict) -> FittedITR:
    if "itr" not in cfg:
        raise ConfigError("config needs 'itr' (path to a fitted rule from 'itr fit')")
    p = _path(cfg, cfg["itr"])
    if not p.exists():
        raise ConfigError(f"itr: file not found: {p}")
    try:
        with open(p, encoding="utf-8") as fh:
            return FittedITR.from_dict(json.load(fh))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{p}: not a fitted rule ({exc})") from None


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# commands ----------------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path) -> dict:
    seed = _seed(cfg, "simulate")
    sc = _scenario(cfg, seed=seed)
    ds = simulate(sc)
    write_long_csv(ds, out / "outcomes.csv", out / "covariates.csv", out / "potential.csv")
    oracle = oracle_decisions(ds)
    return {
        "files": ["outcomes.csv", "covariates.csv", "potential.csv"],
        "n_subjects": ds.n,
        "n_observations": int(sum(r.m for r in ds.records)),
        "alpha_true": ds.meta["alpha_true"],
        "oracle_share_group_2": float(np.mean(oracle == 2)),
    }


def cmd_fit(cfg: dict, out: Path) -> dict:
    seed = _seed(cfg, "fit")
    data = _dataset(cfg)
    method = _method(cfg)
    itr = fit_itr(data, method, _options(cfg, seed), cfg.get("prefer", "larger_ats"))
    _dump_json(_clean(itr.to_dict()), out / "itr.json")
    sig = itr.signature
    result = {
        "method": method,
        "alpha": sig.alpha,
        "iterations": sig.iterations,
        "converged": sig.converged,
        "group_fits": [
            {"loglik": f.loglik, "sigma2": f.sigma2, "converged": f.converged, "n_iter": f.n_iter}
            for f in itr.group_fits
        ],
        "files": ["itr.json"],
    }
    if not sig.converged:
        result["_unconverged"] = f"{method} did not converge in {sig.iterations} outer iterations"
    return result


def cmd_decide(cfg: dict, out: Path) -> dict:
    itr = _load_itr(cfg)
    data = _dataset(cfg)
    decisions = decide_many(itr, data.X)
    ats = itr.ats(data.X @ itr.alpha)
    rows = [
        [sid, int(d), repr(float(a1)), repr(float(a2))]
        for sid, d, (a1, a2) in zip(data.ids, decisions, ats)
    ]
    _write_csv(out / "decisions.csv", ["subject_id", "decision", "ats_group1", "ats_group2"], rows)
    return {
        "n_subjects": data.n,
        "n_assigned": [int(np.sum(decisions == 1)), int(np.sum(decisions == 2))],
        "files": ["decisions.csv"],
    }


def cmd_evaluate(cfg: dict, out: Path) -> dict:
    itr = _load_itr(cfg)
    if "test_scenario" in cfg:
        seed = cfg.get("seed")
        if seed is None:
            raise ConfigError("evaluating on a simulated test set needs a seed")
        test = simulate(_scenario(cfg, "test_scenario", seed=_seed(cfg, "evaluate")))
    else:
        test = _dataset(cfg, "test" if "test" in cfg else "data")
    outcome = cfg.get("outcome", "noiseless" if test.potential is not None else "observed")
    report = evaluate(itr, test, outcome)
    result = report.to_dict()
    cs, _ = test.observed_change_scores()
    u = oriented_outcomes(cs, itr.prefer)
    result["uniform_ipwe"] = {f"all_group_{k}": uniform_policy_value(k, test.groups, u) for k in (1, 2)}
    return result


def cmd_cv(cfg: dict, out: Path) -> dict:
    seed = _seed(cfg, "cv")
    data = _dataset(cfg)
    method = _method(cfg)
    cv = dict(cfg.get("cv") or {})
    res = cross_validate(
        data,
        method,
        folds=int(cv.get("folds", 10)),
        repeats=int(cv.get("repeats", 100)),
        seed=seed,
        options=_options(cfg, seed),
        prefer=cfg.get("prefer", "larger_ats"),
        outcome=cv.get("outcome", "change_score"),
        workers=int(cfg.get("threads", 1)),
    )
    rows = []
    for r, f in itertools.product(range(res.ipwe.shape[0]), range(res.ipwe.shape[1])):
        rows.append([r, f, _fmt(res.ipwe[r, f]), _fmt(res.uniform[1][r, f]), _fmt(res.uniform[2][r, f]),
                     bool(res.converged[r, f])])
    _write_csv(out / "cv_folds.csv",
               ["repeat", "fold", "ipwe", "ipwe_all_group_1", "ipwe_all_group_2", "converged"], rows)
    d = res.to_dict()
    return {
        "method": method,
        "summary": d["summary"],
        "uniform": {k: v["summary"] for k, v in d["uniform"].items()},
        "n_folds_total": int(res.ipwe.size),
        "n_converged": int(res.converged.sum()),
        "files": ["cv_folds.csv"],
    }


def _fmt(v) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else ""


SWEEP_DEFAULTS = {
    "thetas": [0.0, 1.0, 2.0, 5.0],
    "ps": [2, 10, 20, 30],
    "missingness": ["none", "mcar", "dropout"],
    "methods": ["npats", "pats", "mle"],
    "replications": 200,
    "n_test_per_group": 500,
}


def _sweep_job(args):
    """One replication of one grid cell: fit every method, score on a fresh test set."""
    base, theta, p, miss, rep, methods, n_test, options, seed = args
    ss = np.random.SeedSequence([seed, int(round(theta * 1000)), p, rep])
    train_seed, test_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    sc = base.with_(theta_degrees=theta, p=p, missingness=miss, seed=train_seed)
    train = simulate(sc)
    test = simulate(sc.with_(missingness=MissingnessSpec.none(), n_per_group=n_test, seed=test_seed))
    groups = test.groups
    pot = test.potential_change_scores()
    u = pot[np.arange(test.n), groups - 1]
    oracle = oracle_decisions(test)
    rows = []
    for k in (1, 2):
        d = np.full(test.n, k)
        rows.append((f"all_group_{k}", uniform_policy_value(k, groups, u), float(np.mean(d == oracle)), 0, True, None))
    for method in ["true_alpha"] + list(methods):
        try:
            if method == "true_alpha":
                itr = fit_itr(train, "fixed", options, alpha=true_alpha(p))
            else:
                itr = fit_itr(train, method, options)
        except ITRError as exc:
            rows.append((method, np.nan, np.nan, 0, False, f"{type(exc).__name__}: {exc}"))
            continue
        rep_ = evaluate(itr, test)
        cos = abs(float(itr.alpha @ true_alpha(p)))
        rows.append((method, rep_.value, rep_.pcd, itr.signature.iterations, itr.signature.converged, cos))
    return rows


def cmd_sweep(cfg: dict, out: Path) -> dict:
    seed = _seed(cfg, "sweep")
    spec = {**SWEEP_DEFAULTS, **(cfg.get("sweep") or {})}
    unknown = set(spec) - set(SWEEP_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown sweep fields: {sorted(unknown)}")
    base = _scenario({"scenario": cfg.get("scenario", {})}) if "scenario" in cfg else SimScenario()
    misses = [MissingnessSpec.from_dict(m) for m in spec["missingness"]]
    methods = [str(m).lower() for m in spec["methods"]]
    for m in methods:
        if m not in ("npats", "pats", "mle"):
            raise ConfigError(f"unknown sweep method {m!r}")
    reps = int(spec["replications"])
    if reps < 1:
        raise ConfigError("replications must be positive")
    options = _options(cfg, seed)
    cells = list(itertools.product([float(t) for t in spec["thetas"]], [int(p) for p in spec["ps"]], misses))
    for theta, p, miss in cells:
        base.with_(theta_degrees=theta, p=p, missingness=miss)  # validates the cell
    jobs = [
        (base, theta, p, miss, r, methods, int(spec["n_test_per_group"]), options, seed)
        for (theta, p, miss) in cells
        for r in range(reps)
    ]
    threads = int(cfg.get("threads", 1))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_job, jobs, chunksize=1))
    else:
        results = [_sweep_job(j) for j in jobs]

    raw_rows, table = [], []
    errors = []
    for job, rows in zip(jobs, results):
        _, theta, p, miss, r = job[:5]
        for method, value, pcd_, iters, conv, extra in rows:
            if isinstance(extra, str):
                errors.append({"theta": theta, "p": p, "missingness": miss.label, "replication": r,
                               "method": method, "error": extra})
                extra = None
            raw_rows.append([theta, p, miss.label, r, method, _fmt(value), _fmt(pcd_), iters, conv,
                             "" if extra is None else _fmt(extra)])
    order = ["true_alpha", *methods, "all_group_1", "all_group_2"]
    for theta, p, miss in cells:
        sel = [row for row in raw_rows if row[0] == theta and row[1] == p and row[2] == miss.label]
        for method in order:
            mrows = [row for row in sel if row[4] == method]
            vals = np.array([float(row[5]) for row in mrows if row[5] != ""])
            pcds = np.array([float(row[6]) for row in mrows if row[6] != ""])
            conv = sum(1 for row in mrows if row[8])
            vsd = vals.std(ddof=1) if vals.size > 1 else 0.0
            psd = pcds.std(ddof=1) if pcds.size > 1 else 0.0
            table.append([
                theta, p, miss.label, method, vals.size,
                _fmt(vals.mean()) if vals.size else "", _fmt(vsd), _fmt(1.96 * vsd),
                _fmt(pcds.mean()) if pcds.size else "", _fmt(psd), _fmt(1.96 * psd), conv,
            ])
    _write_csv(out / "sweep_replications.csv",
               ["theta", "p", "missingness", "replication", "method", "value", "pcd", "iterations",
                "converged", "cos_alpha"], raw_rows)
    _write_csv(out / "sweep_summary.csv",
               ["theta", "p", "missingness", "method", "n", "value_mean", "value_sd", "value_1.96sd",
                "pcd_mean", "pcd_sd", "pcd_1.96sd", "n_converged"], table)
    return {
        "n_cells": len(cells),
        "replications": reps,
        "methods": order,
        "errors": errors,
        "files": ["sweep_summary.csv", "sweep_replications.csv"],
    }


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "decide": cmd_decide,
    "evaluate": cmd_evaluate,
    "cv": cmd_cv,
    "sweep": cmd_sweep,
}


def run_command(command: str, cfg: dict, out: Path) -> int:
    """Run one subcommand, write ``report.json``/``timing.json`` and return the exit code."""
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in cfg.items() if not k.startswith("_")}
    start = time.perf_counter()
    code = EXIT_OK
    report = {"command": command, "config": echo, "seed": cfg.get("seed"), "version": _version()}
    try:
        result = HANDLERS[command](cfg, out)
        note = result.pop("_unconverged", None)
        if note:
            code = EXIT_CONVERGENCE
            report["error"] = {"kind": "convergence", "message": note}
        report["result"] = result
    except ConfigError as exc:
        code = EXIT_CONFIG
        report["error"] = {"kind": "config", "message": f"{command}: {exc}"}
    except ConvergenceError as exc:
        code = EXIT_CONVERGENCE
        report["error"] = {"kind": "convergence", "message": f"{command}: {exc}"}
    except (DataError, ITRError) as exc:
        code = EXIT_DATA
        report["error"] = {"kind": "data", "message": f"{command}: {type(exc).__name__}: {exc}"}
    report["exit_code"] = code
    _dump_json(_clean(report), out / "report.json")
    _dump_json({"command": command, "wall_clock_seconds": time.perf_counter() - start}, out / "timing.json")
    if "error" in report:
        print(f"itr {report['error']['message']}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itr",
        description="Trajectory-based individualized treatment rules: simulate, fit, decide, evaluate.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides config 'seed'")
    parser.add_argument("--out", default=None, help="output directory (default: config 'out' or '.')")
    parser.add_argument("--method", choices=("npats", "pats", "mle"), default=None)
    parser.add_argument("--threads", type=int, default=None, help="worker processes for cv/sweep")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "method": args.method, "threads": args.threads})
    except ConfigError as exc:
        print(f"itr {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else _path(cfg, cfg.get("out", "."))
    if args.threads is not None and args.threads < 1:
        print("itr: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    return run_command(args.command, cfg, out)


if __name__ == "__main__":
    sys.exit(main())
