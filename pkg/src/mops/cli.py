"""Command-line experiment runner: ``run``, ``sweep``, ``verify`` and ``rates``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kernels
from . import metrics as M
from .acceptance import run_all, scheme_flops_table
from .config import TrainConfig, load_config
from .errors import InvalidArgument, MopsError, NumericFailure
from .training import TrainResult, run_training

SCHEMA_VERSION = 1
SWEEP_AXES = ("T", "beta", "eta", "D", "scheme", "algorithm")
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _summary_stats(records: list[M.MetricsRecord]) -> dict:
    if not records:
        return {}
    last = records[-1]
    avg = {k: float(np.mean([getattr(r, k) for r in records]))
           for k in ("o_err", "g_err", "c_err", "min_norm")}
    return {
        "final": {"o_err": last.o_err, "g_err": last.g_err, "c_err": last.c_err,
                  "min_norm": last.min_norm, "o_err_agents": list(last.o_err_agents),
                  "g_err_agents": list(last.g_err_agents), "gamma": list(last.gamma)},
        "avg": avg,
        "avg_o_err_agents": np.mean([r.o_err_agents for r in records], axis=0).tolist(),
        "flops_agent": last.flops_agent,
        "flops_ctrl": last.flops_ctrl,
        "bytes": last.bytes,
    }


def _write_run(result: TrainResult, csv_path: Path) -> dict:
    csv_path.write_text(result.csv())
    return {"csv": csv_path.name, "config": result.config.to_dict(),
            **_summary_stats(result.records)}


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "metrics_every", None) is not None:
        changes["metrics_every"] = args.metrics_every
    if getattr(args, "harness", None) is not None:
        changes["harness"] = args.harness
    return cfg.with_(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(cfg)
    summary = {"schema_version": SCHEMA_VERSION, "command": "run", "backend": kernels.BACKEND,
               "runs": [_write_run(result, out / "metrics.csv")]}
    _write_json(out / "summary.json", summary)
    print(f"wrote {out / 'metrics.csv'} ({len(result.records)} rows)")
    return EXIT_OK


def _parse_value(axis: str, raw: str):
    try:
        if axis in ("T", "D"):
            v = int(raw)
        elif axis in ("beta", "eta"):
            v = float(raw)
        else:
            v = raw
    except ValueError as exc:
        raise InvalidArgument(f"bad value {raw!r} for axis {axis}") from exc
    return v


def sweep_config(cfg: TrainConfig, axis: str, value, rate_c: float | None) -> TrainConfig:
    if axis == "T":
        cfg = cfg.with_(T=value)
        if rate_c is not None:
            cfg = cfg.with_(beta=rate_c / math.sqrt(value))
        return cfg
    if axis == "D":
        return cfg.with_(task=replace(cfg.task, train_size=value))
    return cfg.with_(**{axis: value})


def _bound_kind(cfg: TrainConfig) -> str:
    return "O-dynamic" if cfg.dynamic else "O-static"


def _fit_summary(configs: list[TrainConfig], runs: list[dict]) -> dict:
    obs = []
    for cfg, run in zip(configs, runs):
        if not run.get("avg"):
            continue
        obs.append(M.Observation(_bound_kind(cfg), cfg.T, cfg.beta, cfg.eta,
                                 cfg.task.train_size, run["avg"]["o_err"]))
        if cfg.task.kind == "timeseries" and run["avg"]["g_err"] > 0:
            obs.append(M.Observation("G", cfg.T, cfg.beta, cfg.eta, cfg.task.train_size,
                                     run["avg"]["g_err"]))
    try:
        fit = M.fit_constants(obs)
    except InvalidArgument as exc:
        return {"constants": None, "reason": str(exc)}
    consts = {k: (None if math.isnan(v) else v) for k, v in fit.constants.as_dict().items()}
    return {"constants": consts, "residual": fit.residual, "identified": list(fit.identified)}


def _slopes(axis_values: list, runs: list[dict]) -> dict:
    out = {}
    for key in ("o_err", "g_err", "c_err"):
        pts = [(float(v), r["avg"][key]) for v, r in zip(axis_values, runs) if r.get("avg")]
        try:
            out[key] = M.fit_rate_slope(pts)
        except InvalidArgument:
            out[key] = None
    return out


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise InvalidArgument(f"--axis must be one of {SWEEP_AXES}")
    values = [_parse_value(args.axis, v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise InvalidArgument("--values must list at least one value")
    if args.rate_schedule is not None and args.axis != "T":
        raise InvalidArgument("--rate-schedule only applies to axis=T")
    base, _ = load_config(args.config)
    base = _apply_overrides(base, args)
    configs = [sweep_config(base, args.axis, v, args.rate_schedule) for v in values]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = max(1, int(os.environ.get("MOPS_THREADS", "1") or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run_training, configs))
    runs = []
    for v, res in zip(values, results):
        runs.append({"value": v, **_write_run(res, out / f"run_{args.axis}_{v}.csv")})
    summary = {"schema_version": SCHEMA_VERSION, "command": "sweep", "axis": args.axis,
               "values": values, "rate_schedule": args.rate_schedule,
               "backend": kernels.BACKEND, "runs": runs}
    if args.axis in ("T", "D", "beta", "eta") and len(values) >= 4:
        summary["slopes"] = _slopes(values, runs)
    if args.axis in ("T", "D", "beta", "eta") and len(values) >= 3:
        summary["fit"] = _fit_summary(configs, runs)
    if args.axis == "scheme":
        table = scheme_flops_table()
        summary["flops_table"] = {s: table[s] for s in values if s in table}
    _write_json(out / "summary.json", summary)
    print(f"wrote {len(runs)} runs and {out / 'summary.json'}")
    return EXIT_OK


def load_outputs(out: Path) -> dict:
    """Summary plus parsed CSVs of a run or sweep directory; raises on anything missing."""
    path = out / "summary.json"
    if not path.is_file():
        raise InvalidArgument(f"{path} not found")
    try:
        summary = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: invalid JSON ({exc})") from exc
    if summary.get("schema_version") != SCHEMA_VERSION:
        raise InvalidArgument(f"{path}: unsupported schema_version {summary.get('schema_version')}")
    runs = summary.get("runs") or []
    if not runs:
        raise InvalidArgument(f"{path}: no runs recorded")
    for run in runs:
        csv_path = out / run["csv"]
        if not csv_path.is_file():
            raise InvalidArgument(f"{csv_path} not found")
        run["columns"] = M.read_metrics_csv(csv_path)
    return summary


def cmd_verify(args) -> int:
    summary = load_outputs(Path(args.out))
    print(f"inputs ok: {len(summary['runs'])} run(s) in {args.out}")
    ids = [int(x) for x in args.only.split(",")] if args.only else None
    results = run_all(ids, echo=print)
    failed = [r.id for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_rates(args) -> int:
    out = Path(args.out)
    summary = load_outputs(out)
    if summary.get("axis") not in ("T", "D", "beta", "eta"):
        raise InvalidArgument("rates needs a sweep over T, D, beta or eta")
    values = summary["values"]
    runs = summary["runs"]
    pts = {}
    for key in ("o_err", "g_err", "c_err"):
        pts[key] = [(float(v), float(np.mean(r["columns"][key]))) for v, r in zip(values, runs)]
    report = {"schema_version": SCHEMA_VERSION, "axis": summary["axis"], "points": pts,
              "slopes": {}}
    for key, series in pts.items():
        try:
            report["slopes"][key] = M.fit_rate_slope(series)
        except InvalidArgument as exc:
            report["slopes"][key] = None
            report.setdefault("notes", {})[key] = str(exc)
    _write_json(out / "rates.json", report)
    print(json.dumps(report["slopes"], indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mops", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON training config")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--metrics-every", type=int)
            sp.add_argument("--harness", choices=("single", "threaded"))
        sp.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("run", help="train once and write metrics"))
    sw = sub.add_parser("sweep", help="train once per value of one axis")
    common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--rate-schedule", type=float, nargs="?", const=0.5, default=None,
                    metavar="C", help="beta = C / sqrt(T) for T sweeps (C defaults to 0.5)")
    vf = sub.add_parser("verify", help="validate outputs and run the acceptance checks")
    common(vf, config=False)
    vf.add_argument("--only", help="comma-separated check ids")
    rt = sub.add_parser("rates", help="log-log slopes of a sweep")
    common(rt, config=False)
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "rates": cmd_rates}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except NumericFailure as exc:
        where = f" at round {exc.round_index}" if exc.round_index is not None else ""
        print(f"error: numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MopsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
