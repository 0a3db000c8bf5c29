"""Line-delimited JSON result files and their comparison.

A result directory holds::

    fixed.jsonl    {"name", "mean", "sd", "precision"}
    hyper.jsonl    {"point", "theta": {...}, "log_density", "weight"} plus one {"summary": ...} per name
    effects.jsonl  {"effect", "node", "mean", "sd", "precision_diag", "precision_exact", "method", "step"}
    alpha.jsonl    {"name", "point", "gaussian_mean", "gaussian_sd", "nodes", "dropped", "used"}

Wall-clock times are kept out of these files (they live in the manifest and
run log) so that identical inputs give byte-identical results.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .consensus import marginals_from_multivariate
from .infer import BlockFitResult
from .sequential import ConsensusReport

RESULT_FILES = ("fixed.jsonl", "hyper.jsonl", "effects.jsonl", "alpha.jsonl")


def _dump(path: Path, records) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fixed_records(marginals: dict) -> list:
    return [{"name": n, "mean": m.mean, "sd": m.sd, "precision": m.precision}
            for n, m in marginals.items()]


def _hyper_records(grid, roles=None) -> list:
    if grid is None:
        return []
    out = []
    for k, (pt, ld, w) in enumerate(zip(grid.points, grid.log_density, grid.weights)):
        out.append({"point": k, "theta": {n: float(v) for n, v in zip(grid.names, pt)},
                    "log_density": float(ld), "weight": float(w)})
    for row in grid.summary(roles):
        out.append({"summary": row})
    return out


def _density_records(effect: str, density, method: str, step=None) -> list:
    out = []
    for (lbl, m) in zip(density.node_labels, marginals_from_multivariate(density)):
        out.append({"effect": effect, "node": int(lbl[1]), "mean": m.mean, "sd": m.exact.sd,
                    "precision_diag": m.precision, "precision_exact": m.exact_precision,
                    "method": method, "step": step})
    return out


def _report_effect_records(report: ConsensusReport) -> list:
    out = []
    for name, pe in report.pooled.items():
        out += _density_records(name, pe.multivariate, "multivariate")
        for lbl, g in zip(pe.node_labels, pe.marginal):
            out.append({"effect": name, "node": int(lbl[1]), "mean": g.mean, "sd": g.sd,
                        "precision_diag": g.precision, "precision_exact": g.precision,
                        "method": "marginal", "step": None})
    for le in report.local.values():
        out += _density_records(le.name, le.density, "local", le.step)
    return out


def write_fit(out_dir, result, roles=None) -> list:
    """Write a ``BlockFitResult`` or ``ConsensusReport``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(result, BlockFitResult):
        fixed = _fixed_records(result.fixed_marginals)
        hyper = _hyper_records(result.hyper_posterior, roles)
        effects = []
        for name, d in result.effect_densities.items():
            effects += _density_records(name, d, "full")
        alphas = []
    else:
        fixed = _fixed_records(result.fixed_marginals)
        hyper = _hyper_records(result.hyper_posterior, roles)
        effects = _report_effect_records(result)
        alphas = [{"name": a.name, "point": a.estimate.point,
                   "gaussian_mean": a.estimate.gaussian.mean, "gaussian_sd": a.estimate.gaussian.sd,
                   "nodes": a.estimate.node_count, "dropped": a.estimate.dropped, "used": a.used}
                  for a in result.alphas.values()]
    paths = []
    for fname, recs in zip(RESULT_FILES, (fixed, hyper, effects, alphas)):
        p = out / fname
        _dump(p, recs)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------- comparison


def load_result(path) -> dict:
    d = Path(path)
    res = {f: read_jsonl(d / f) for f in RESULT_FILES if (d / f).exists()}
    man = d / "manifest.json"
    res["manifest"] = json.loads(man.read_text()) if man.exists() else {}
    return res


def primary_effects(records: list, method: Optional[str] = None) -> dict:
    """``{effect: {node: record}}`` preferring ``method`` then full/multivariate/local records."""
    order = [method] if method else []
    order += ["full", "multivariate", "local", "marginal"]
    out: dict = {}
    for meth in order:
        for r in records:
            if r["method"] != meth:
                continue
            eff = out.setdefault(r["effect"], {})
            if r["node"] not in eff:
                eff[r["node"]] = r
    return out


def _fit_time(res: dict) -> Optional[float]:
    phases = res.get("manifest", {}).get("wall_times", {})
    return phases.get("fit")


def compare_results(a: dict, b: dict, truth: Optional[dict] = None) -> dict:
    """Agreement metrics between two result sets over identical node labels."""
    ea, eb = primary_effects(a["effects.jsonl"]), primary_effects(b["effects.jsonl"])
    metrics: dict = {"effects": {}, "fixed": {}, "hyper_mode": {}}
    for name in sorted(set(ea) & set(eb)):
        if set(ea[name]) != set(eb[name]):
            raise ValueError(f"effect {name!r}: node labels differ between results")
        nodes = sorted(ea[name])
        ma = np.array([ea[name][k]["mean"] for k in nodes])
        mb = np.array([eb[name][k]["mean"] for k in nodes])
        sa = np.array([ea[name][k]["sd"] for k in nodes])
        sb = np.array([eb[name][k]["sd"] for k in nodes])
        pooled_sd = np.sqrt(0.5 * (sa ** 2 + sb ** 2))
        corr = 1.0 if np.allclose(ma, mb, rtol=0, atol=0) else float(np.corrcoef(ma, mb)[0, 1])
        row = {"correlation": corr, "rmse": float(np.sqrt(np.mean((ma - mb) ** 2))),
               "mean_abs_delta_over_sd": float(np.mean(np.abs(ma - mb) / np.maximum(pooled_sd, 1e-300))),
               "nodes": len(nodes)}
        if truth and name in truth:
            t = np.asarray(truth[name], dtype=float)
            if t.size == len(nodes):
                row["rmse_a_truth"] = float(np.sqrt(np.mean((ma - t) ** 2)))
                row["rmse_b_truth"] = float(np.sqrt(np.mean((mb - t) ** 2)))
        metrics["effects"][name] = row
    fa = {r["name"]: r for r in a.get("fixed.jsonl", [])}
    fb = {r["name"]: r for r in b.get("fixed.jsonl", [])}
    for name in sorted(set(fa) & set(fb)):
        metrics["fixed"][name] = {"mean_delta": fb[name]["mean"] - fa[name]["mean"],
                                  "sd_delta": fb[name]["sd"] - fa[name]["sd"]}
    ha = {r["summary"]["name"]: r["summary"] for r in a.get("hyper.jsonl", []) if "summary" in r}
    hb = {r["summary"]["name"]: r["summary"] for r in b.get("hyper.jsonl", []) if "summary" in r}
    for name in sorted(set(ha) & set(hb)):
        metrics["hyper_mode"][name] = hb[name]["mode"] - ha[name]["mode"]
    ta, tb = _fit_time(a), _fit_time(b)
    metrics["speedup"] = (ta / tb) if ta and tb else (1.0 if a is b else None)
    return metrics
