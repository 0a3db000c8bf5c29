"""Command-line front end: ``simulate``, ``fit``, ``compare`` and ``bench``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .alpha import AlphaError
from .consensus import ConsensusError
from .families import DomainError
from .gmrf import FactorizationError
from .infer import GridOptions, InferenceError, fit_block
from .model import ConfigError, _UniqueKeyLoader, parse_model_config, serialize_model_config
from .results import RESULT_FILES, checksum, compare_results, load_result, write_fit
from .sequential import SequentialError, SequentialOptions, run_sc, run_scp
from .sim import (Scenario, SpaceTimeScenario, simulate_space_time, simulate_survey,
                  space_time_model_config, survey_model_config)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "SEQCONSENSUS_THREADS"
NUMERIC_ERRORS = (InferenceError, FactorizationError, SequentialError, ConsensusError, AlphaError,
                  DomainError, np.linalg.LinAlgError, FloatingPointError, OverflowError)


def _engine_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _load_yaml(path: str, section: str = "<root>"):
    text = Path(path).read_text()
    try:
        return yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else section
        raise ConfigError(where, f"malformed document: {exc}") from None


def _write_manifest(out: Path, command: str, args, files, wall_times: dict, extra=None) -> Path:
    files = [Path(f) for f in files]
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "data": list(getattr(args, "data", None) or []),
        "seed": getattr(args, "seed", None),
        "options": {k: getattr(args, k) for k in ("mode", "pooling", "correct_prior", "threads",
                                                  "grid_points") if hasattr(args, k)},
        "engine_version": _engine_version(),
        "wall_times": {k: round(v, 3) for k, v in wall_times.items()},
        "outputs": [{"path": f.name, "sha256": checksum(f)} for f in files],
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get(THREADS_ENV, "1"))


# --------------------------------------------------------------------------- simulate


def _scenario_from_config(doc):
    if not isinstance(doc, dict) or "scenario" not in doc:
        raise ConfigError("scenario", "missing 'scenario' section")
    kind = doc["scenario"]
    params = doc.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("params", "must be a mapping")
    try:
        if kind == "survey":
            return kind, Scenario.from_dict(params)
        if kind == "space_time":
            return kind, SpaceTimeScenario(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError("params", str(exc)) from None
    raise ConfigError("scenario", f"unknown scenario kind {kind!r}")


def cmd_simulate(args) -> int:
    kind, scenario = _scenario_from_config(_load_yaml(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    files = []
    if kind == "survey":
        sim = simulate_survey(scenario, args.seed)
        for name in ("stratified", "preferential", "lgcp_counts"):
            p = out / f"{name}.csv"
            sim[name].to_csv(p, index=False, float_format="%.17g")
            files.append(p)
        tr = sim["truth"]
        truth = {"scenario": scenario.to_dict(), "field": np.asarray(tr.spatial).tolist(),
                 "trend": tr.trend.tolist(), "covariate": tr.covariate.tolist(),
                 "lgcp_intercept": tr.extras["lgcp_intercept"],
                 "b0": scenario.beta0, "b1": scenario.beta1, "alpha": scenario.alpha}
        model_doc = survey_model_config(scenario)
    else:
        sim = simulate_space_time(scenario, args.seed)
        p = out / "data.csv"
        sim["data"].to_csv(p, index=False, float_format="%.17g")
        files.append(p)
        truth = {"scenario": vars(scenario), "st": sim["field"].ravel().tolist(),
                 "b0": scenario.intercept}
        model_doc = space_time_model_config(scenario)
    sim_time = time.perf_counter() - t0
    tp = out / "truth.json"
    tp.write_text(json.dumps(truth, sort_keys=True) + "\n")
    mp = out / "model.yaml"
    mp.write_text(serialize_model_config(parse_model_config(yaml.safe_dump(model_doc))))
    files += [tp, mp]
    _write_manifest(out, "simulate", args, files, {"simulate": sim_time})
    return EXIT_OK


# --------------------------------------------------------------------------- fit


def _read_data(items) -> dict:
    tables = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).stem
        if name == "data":
            name = "main"
        tables[name] = pd.read_csv(path)
    return tables


def _run_fit(spec, tables, mode, opts: SequentialOptions):
    if mode == "full":
        return fit_block(spec, tables, options=opts.grid)
    if mode == "sc":
        return run_sc(spec, tables, options=opts)
    return run_scp(spec, tables, options=opts)


def cmd_fit(args) -> int:
    spec = parse_model_config(Path(args.config).read_text())
    tables = _read_data(args.data)
    if not tables:
        raise ConfigError("--data", "at least one data table is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = GridOptions(n_points=args.grid_points, threads=_threads(args))
    opts = SequentialOptions(pooling=args.pooling, correct_prior=args.correct_prior == "on",
                             grid=grid, log_path=str(out / "run_log.jsonl") if args.mode != "full" else None)
    t0 = time.perf_counter()
    result = _run_fit(spec, tables, args.mode, opts)
    fit_time = time.perf_counter() - t0
    files = write_fit(out, result, spec.theta_roles())
    walls = {"fit": fit_time}
    if args.mode != "full":
        files.append(out / "run_log.jsonl")
        walls.update({f"step_{k}": t for k, t in enumerate(result.step_times, 1)})
        if result.first_pass is not None:
            walls["first_pass"] = result.first_pass.total_time
    else:
        (out / "run_log.jsonl").write_text(json.dumps({"phase": "full", "event": "fit",
                                                       "log_marginal_likelihood": result.log_marginal_likelihood},
                                                      sort_keys=True) + "\n")
        files.append(out / "run_log.jsonl")
    _write_manifest(out, "fit", args, files, walls)
    return EXIT_OK


# --------------------------------------------------------------------------- compare / bench


def cmd_compare(args) -> int:
    a, b = load_result(args.result_a), load_result(args.result_b)
    truth = json.loads(Path(args.truth).read_text()) if args.truth else None
    try:
        metrics = compare_results(a, b, truth)
    except ValueError as exc:
        raise ConfigError("results", str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "metrics.json"
    p.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "compare", args, [p], {})
    return EXIT_OK


def cmd_bench(args) -> int:
    kind, scenario = _scenario_from_config(_load_yaml(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = GridOptions(n_points=args.grid_points, threads=_threads(args))
    rows = []
    for k in range(args.seeds):
        seed = args.seed + k
        if kind == "survey":
            sim = simulate_survey(scenario, seed)
            tables = {n: sim[n] for n in ("stratified", "preferential", "lgcp_counts")}
            doc, effect = survey_model_config(scenario), "field"
        else:
            sim = simulate_space_time(scenario, seed)
            tables, doc, effect = {"main": sim["data"]}, space_time_model_config(scenario), "st"
        spec = parse_model_config(yaml.safe_dump(doc))
        opts = SequentialOptions(pooling=args.pooling, correct_prior=args.correct_prior == "on", grid=grid)
        t0 = time.perf_counter()
        full = fit_block(spec, tables, options=grid)
        t_full = time.perf_counter() - t0
        t0 = time.perf_counter()
        sc = run_sc(spec, tables, options=opts)
        t_sc = time.perf_counter() - t0
        full_mean = full.effect_densities[effect].mean
        sc_mean = np.concatenate([sc.effect(n).mean for n in sc.effect_names()
                                  if n == effect or n.startswith(effect + "#")])
        row = {"seed": seed, "full_time": round(t_full, 3), "sc_time": round(t_sc, 3),
               "ratio": round(t_sc / t_full, 3),
               "correlation": float(np.corrcoef(full_mean, sc_mean)[0, 1])}
        if sc.alphas:
            row["alpha"] = {n: a.used for n, a in sc.alphas.items()}
        rows.append(row)
    p = out / "bench.jsonl"
    p.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    _write_manifest(out, "bench", args, [p], {"total": sum(r["full_time"] + r["sc_time"] for r in rows)})
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqconsensus",
                                     description="Sequential consensus fitting of latent Gaussian models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help=f"grid evaluation threads (default ${THREADS_ENV} or 1)")

    p = sub.add_parser("simulate", help="simulate a scenario")
    common(p)
    p.set_defaults(func=cmd_simulate)

    def fitting(p):
        p.add_argument("--pooling", choices=("marginal", "multivariate"), default="multivariate")
        p.add_argument("--correct-prior", choices=("on", "off"), default="off")
        p.add_argument("--grid-points", type=int, default=7)

    p = sub.add_parser("fit", help="fit a model (full, sc or scp)")
    common(p)
    p.add_argument("--data", action="append", help="data table as NAME=PATH or PATH (repeatable)")
    p.add_argument("--mode", choices=("full", "sc", "scp"), default="sc")
    fitting(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="compare two result directories")
    p.add_argument("result_a")
    p.add_argument("result_b")
    p.add_argument("--truth", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="time full versus sequential fits over seeds")
    common(p)
    p.add_argument("--seeds", type=int, default=1)
    fitting(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
