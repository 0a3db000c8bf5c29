"""Synthetic scenarios: latent fields, stratified surveys and preferential (LGCP) sampling.

Randomness is derived from one integer seed through ``numpy.random.SeedSequence``:
child 0 drives the spatial field, child 1 the temporal trend, child 2 the
covariate, and sampling routines spawn one child per time node from their own
seed so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .gmrf import (EffectSpec, GaussianDensity, build_effect_precision, sample_gmrf)

MAX_LOG_INTENSITY = 50.0
STRUCTURES = ("a", "b", "c", "d")


@dataclass(frozen=True)
class Scenario:
    """Rectangular domain on an ``nx`` x ``ny`` lattice observed at ``time_nodes`` times.

    ``structure`` selects how space and time combine:
    ``a`` independent spatial replicates per time, ``b`` replicates plus iid
    time effects, ``c`` one spatial field plus a smooth trend, ``d`` replicates
    plus a smooth trend.
    """

    bounds: tuple = (0.0, 10.0, 0.0, 10.0)
    nx: int = 10
    ny: int = 10
    time_nodes: int = 10
    structure: str = "c"
    beta0: float = 1.0
    beta1: float = 0.5
    gamma_prec: float = 3.0
    spatial_range: float = 3.0
    spatial_sd: float = 1.0
    trend_sd: float = 1.0
    iid_time_sd: float = 0.5
    alpha: float = 0.7
    covariate_range: float = 5.0
    cells: tuple = (5, 5)
    per_cell: int = 10
    lgcp_target: Optional[float] = None

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError("lattice resolution must be at least 4 x 4")
        if self.time_nodes < 1:
            raise ValueError("time_nodes must be at least 1")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        x0, x1, y0, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError("bounds must describe a non-empty rectangle")

    @property
    def spacing(self) -> tuple:
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) / self.nx, (y1 - y0) / self.ny

    @property
    def cell_area(self) -> float:
        dx, dy = self.spacing
        return dx * dy

    @property
    def target_count(self) -> float:
        if self.lgcp_target is not None:
            return float(self.lgcp_target)
        return float(self.cells[0] * self.cells[1] * self.per_cell * self.time_nodes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["cells"] = list(self.cells)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        doc = dict(doc)
        for key in ("bounds", "cells"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class Truth:
    spatial: np.ndarray
    trend: np.ndarray
    covariate: np.ndarray
    extras: dict = field(default_factory=dict)

    def field_at(self, t: int) -> np.ndarray:
        """Spatio-temporal random effect (without fixed effects) at time node ``t``."""
        u = self.spatial[t] if self.spatial.ndim == 2 else self.spatial
        return u + self.trend[t]

    def eta(self, scenario: Scenario, t: int) -> np.ndarray:
        return scenario.beta0 + scenario.beta1 * self.covariate + self.field_at(t)


def _children(seed, n: int):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


def _matern_sample(nx, ny, spacing, range_, sd, seed) -> np.ndarray:
    if sd == 0:
        return np.zeros(nx * ny)
    if spacing[0] != spacing[1]:
        raise ValueError("lattice fields need square cells")
    spec = EffectSpec("lattice_matern", grid=(nx, ny), spacing=spacing[0],
                      hyper_names={"range": "r", "sd": "s"})
    P = build_effect_precision(spec, {"r": range_, "s": sd})
    return sample_gmrf(GaussianDensity(np.zeros(nx * ny), P), seed)


def simulate_truth(scenario: Scenario, seed) -> Truth:
    s_space, s_trend, s_cov = _children(seed, 3)
    sc = scenario
    T = sc.time_nodes
    if sc.structure in ("a", "b", "d"):
        reps = _children(s_space, T)
        spatial = np.stack([_matern_sample(sc.nx, sc.ny, sc.spacing, sc.spatial_range,
                                           sc.spatial_sd, r) for r in reps])
    else:
        spatial = _matern_sample(sc.nx, sc.ny, sc.spacing, sc.spatial_range, sc.spatial_sd, s_space)
    rng = np.random.default_rng(s_trend)
    if sc.structure == "a":
        trend = np.zeros(T)
    elif sc.structure == "b":
        trend = rng.normal(0.0, sc.iid_time_sd, T)
    else:
        trend = _smooth_trend(T, sc.trend_sd, rng)
    covariate = _matern_sample(sc.nx, sc.ny, sc.spacing, sc.covariate_range, 1.0, s_cov)
    return Truth(spatial, trend, covariate)


def _smooth_trend(T: int, sd: float, rng) -> np.ndarray:
    """Second-order random walk path with level and slope removed, scaled to sample sd ``sd``."""
    if T < 3 or sd == 0:
        return np.zeros(T)
    path = np.cumsum(np.cumsum(rng.standard_normal(T)))
    t = np.arange(T, dtype=float)
    X = np.column_stack([np.ones(T), t - t.mean()])
    resid = path - X @ np.linalg.lstsq(X, path, rcond=None)[0]
    return resid * (sd / resid.std())


def _node_of(scenario: Scenario, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x0, _, y0, _ = scenario.bounds
    dx, dy = scenario.spacing
    i = np.clip(((x - x0) / dx).astype(int), 0, scenario.nx - 1)
    j = np.clip(((y - y0) / dy).astype(int), 0, scenario.ny - 1)
    return i * scenario.ny + j


def _gamma_response(rng, eta: np.ndarray, prec: float) -> np.ndarray:
    mean = np.exp(eta)
    return rng.gamma(shape=prec, scale=mean / prec)


def _table(scenario, truth, xs, ys, ts, rng) -> pd.DataFrame:
    xs, ys, ts = np.asarray(xs, float), np.asarray(ys, float), np.asarray(ts, int)
    node = _node_of(scenario, xs, ys)
    cov = truth.covariate[node]
    eta = np.array([truth.eta(scenario, t)[k] for k, t in zip(node, ts)]) if len(ts) else np.zeros(0)
    resp = _gamma_response(rng, eta, scenario.gamma_prec) if len(ts) else np.zeros(0)
    return pd.DataFrame({"x": xs, "y": ys, "time": ts, "node": node, "covariate": cov,
                         "response": resp})


def stratified_sampling(scenario: Scenario, truth: Truth, seed) -> pd.DataFrame:
    """``per_cell`` uniform locations in every stratum cell at every time node."""
    sc = scenario
    x0, x1, y0, y1 = sc.bounds
    cx, cy = sc.cells
    wx, wy = (x1 - x0) / cx, (y1 - y0) / cy
    frames = []
    for t, child in enumerate(_children(seed, sc.time_nodes)):
        rng = np.random.default_rng(child)
        ci, cj = np.meshgrid(np.arange(cx), np.arange(cy), indexing="ij")
        ci = np.repeat(ci.ravel(), sc.per_cell)
        cj = np.repeat(cj.ravel(), sc.per_cell)
        xs = x0 + (ci + rng.random(ci.size)) * wx
        ys = y0 + (cj + rng.random(cj.size)) * wy
        df = _table(sc, truth, xs, ys, np.full(ci.size, t), rng)
        df["stratum"] = ci * cy + cj
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def calibrate_lgcp_intercept(target_count: float, shared_eta, areas) -> float:
    """Intercept giving an expected total of ``target_count`` points."""
    eta = np.asarray(shared_eta, dtype=float).ravel()
    a = np.broadcast_to(np.asarray(areas, dtype=float), eta.shape).ravel()
    if eta.size == 0:
        raise ValueError("empty lattice")
    if not target_count > 0:
        raise ValueError("target count must be positive")
    if np.any(a <= 0):
        raise ValueError("areas must be positive")
    m = np.max(eta)
    return float(np.log(target_count) - (m + np.log(np.sum(np.exp(eta - m) * a))))


def simulate_lgcp(log_intensity, areas, seed, cell_bounds: Optional[np.ndarray] = None):
    """Poisson counts per cell with mean ``exp(eta) * area``; points uniform within cells.

    ``cell_bounds`` rows are ``(x0, x1, y0, y1)``; without them points are not placed.
    Returns ``(counts, points)`` where ``points`` has columns ``cell, x, y``.
    """
    eta = np.asarray(log_intensity, dtype=float)
    a = np.broadcast_to(np.asarray(areas, dtype=float), eta.shape)
    if np.any(np.isnan(eta)) or np.any(eta == np.inf):
        raise ValueError("log-intensities must be finite or -inf")
    if np.any(eta > MAX_LOG_INTENSITY):
        k = int(np.argmax(eta))
        raise OverflowError(f"log-intensity {eta[k]:.3g} at cell {k} exceeds {MAX_LOG_INTENSITY}")
    if np.any(a <= 0):
        raise ValueError("areas must be positive")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(np.exp(eta) * a)
    cells = np.repeat(np.arange(eta.size), counts)
    if cell_bounds is None:
        return counts, pd.DataFrame({"cell": cells})
    b = np.asarray(cell_bounds, dtype=float)[cells]
    xs = b[:, 0] + rng.random(cells.size) * (b[:, 1] - b[:, 0])
    ys = b[:, 2] + rng.random(cells.size) * (b[:, 3] - b[:, 2])
    return counts, pd.DataFrame({"cell": cells, "x": xs, "y": ys})


def lattice_cell_bounds(scenario: Scenario) -> np.ndarray:
    x0, _, y0, _ = scenario.bounds
    dx, dy = scenario.spacing
    i, j = np.meshgrid(np.arange(scenario.nx), np.arange(scenario.ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    return np.column_stack([x0 + i * dx, x0 + (i + 1) * dx, y0 + j * dy, y0 + (j + 1) * dy])


def preferential_sampling(scenario: Scenario, truth: Truth, seed):
    """LGCP sample whose log-intensity is ``b0* + alpha * trend + spatial field``.

    Returns ``(marks, counts, intercept)``: marked points, per-cell/time counts
    and the calibrated intercept.
    """
    sc = scenario
    T = sc.time_nodes
    shared = np.stack([(truth.spatial[t] if truth.spatial.ndim == 2 else truth.spatial)
                       + sc.alpha * truth.trend[t] for t in range(T)])
    b0s = calibrate_lgcp_intercept(sc.target_count, shared, sc.cell_area)
    bounds = lattice_cell_bounds(sc)
    s_counts, s_marks = _children(seed, 2)
    count_frames, mark_frames = [], []
    for t, (cs, ms) in enumerate(zip(_children(s_counts, T), _children(s_marks, T))):
        counts, pts = simulate_lgcp(b0s + shared[t], sc.cell_area, cs, bounds)
        count_frames.append(pd.DataFrame({
            "node": np.arange(sc.nx * sc.ny), "time": t, "count": counts,
            "area": sc.cell_area, "log_area": np.log(sc.cell_area)}))
        mark_frames.append(_table(sc, truth, pts["x"], pts["y"], np.full(len(pts), t),
                                  np.random.default_rng(ms)))
    return (pd.concat(mark_frames, ignore_index=True), pd.concat(count_frames, ignore_index=True), b0s)


def simulate_survey(scenario: Scenario, seed) -> dict:
    """Truth plus the three data tables of the two-survey experiment."""
    s_truth, s_strat, s_pref = _children(seed, 3)
    truth = simulate_truth(scenario, s_truth)
    strat = stratified_sampling(scenario, truth, s_strat)
    marks, counts, b0s = preferential_sampling(scenario, truth, s_pref)
    truth.extras["lgcp_intercept"] = b0s
    return {"truth": truth, "stratified": strat, "preferential": marks, "lgcp_counts": counts}


# --------------------------------------------------------------------------- model configurations


def survey_model_config(scenario: Scenario, scaled: bool = True) -> dict:
    """Integrated model for the two-survey experiment as a configuration document.

    Gamma marks from both surveys share intercept, covariate, trend and spatial
    field; the point-count model shares the spatial field and, when ``scaled``,
    the trend multiplied by ``alpha`` (otherwise its own trend).
    """
    sc = scenario
    T = sc.time_nodes
    gamma_terms = [{"intercept": "b0"}, {"covariate": "covariate", "beta": "b1"},
                   {"effect": "trend", "index": ["time"]}, {"effect": "field", "index": ["node"]}]
    lgcp_terms = [{"intercept": "b0_pp"}, {"effect": "field", "index": ["node"]}]
    effects = {
        "field": {"kind": "lattice_matern", "grid": [sc.nx, sc.ny], "spacing": sc.spacing[0],
                  "hyper_names": {"range": "field_range", "sd": "field_sd"}},
        "trend": {"kind": "rw2", "size": T, "hyper_names": {"prec": "trend_prec"}},
    }
    priors = {
        "gamma_prec": {"dist": "normal", "mean": 0.0, "sd": 1.5},
        "trend_prec": {"dist": "normal", "mean": 0.0, "sd": 2.0},
        "field_range": {"dist": "normal", "mean": float(np.log(2.0)), "sd": 1.0},
        "field_sd": {"dist": "normal", "mean": 0.0, "sd": 1.0},
    }
    shares = []
    if scaled:
        lgcp_terms.append({"share": "trend", "index": ["time"]})
        shares.append({"source_effect": "trend", "target_block": "points", "alpha_name": "alpha"})
        priors["alpha"] = {"dist": "normal", "mean": 0.0, "sd": 1.0}
    else:
        lgcp_terms.append({"effect": "trend_pp", "index": ["time"]})
        effects["trend_pp"] = {"kind": "rw2", "size": T, "hyper_names": {"prec": "trend_pp_prec"}}
        priors["trend_pp_prec"] = {"dist": "normal", "mean": 0.0, "sd": 2.0}
    return {
        "effects": effects,
        "fixed": [{"name": "b0"}, {"name": "b1"}, {"name": "b0_pp"}],
        "hyper_priors": priors,
        "blocks": [
            {"name": "srs", "family": "gamma", "response": "response", "table": "stratified",
             "hyper": {"prec": "gamma_prec"}, "predictor": gamma_terms},
            {"name": "ps", "family": "gamma", "response": "response", "table": "preferential",
             "hyper": {"prec": "gamma_prec"}, "predictor": gamma_terms},
            {"name": "points", "family": "lgcp_lattice", "response": "count", "table": "lgcp_counts",
             "offset": "log_area", "predictor": lgcp_terms},
        ],
        "shares": shares,
        "partition": {"mode": "by_likelihood_group", "groups": [["srs"], ["ps"], ["points"]]},
    }


@dataclass(frozen=True)
class SpaceTimeScenario:
    """Gaussian observations of an intercept plus an AR1 (time) x lattice (space) field."""

    nx: int = 6
    ny: int = 6
    spacing: float = 1.0
    time_nodes: int = 60
    groups: int = 6
    intercept: float = 2.0
    obs_prec: float = 4.0
    rho: float = 0.9
    spatial_range: float = 3.0
    spatial_sd: float = 1.0
    obs_per_slice: int = 18

    def __post_init__(self):
        if self.groups < 1 or self.time_nodes % self.groups:
            raise ValueError("time_nodes must be a positive multiple of groups")
        if not 1 <= self.obs_per_slice <= self.nx * self.ny:
            raise ValueError("obs_per_slice must lie between 1 and nx * ny")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")


def simulate_space_time(scenario: SpaceTimeScenario, seed) -> dict:
    sc = scenario
    s_field, s_obs = _children(seed, 2)
    spec = space_time_effect(sc)
    P = build_effect_precision(spec, {"ar_prec": 1.0, "ar_rho": sc.rho, "st_range": sc.spatial_range,
                                      "st_sd": sc.spatial_sd})
    n_space = sc.nx * sc.ny
    field_ = sample_gmrf(GaussianDensity(np.zeros(spec.dim), P), s_field).reshape(sc.time_nodes, n_space)
    frames = []
    for t, child in enumerate(_children(s_obs, sc.time_nodes)):
        rng = np.random.default_rng(child)
        nodes = np.sort(rng.choice(n_space, size=sc.obs_per_slice, replace=False))
        y = sc.intercept + field_[t, nodes] + rng.normal(0.0, 1.0 / np.sqrt(sc.obs_prec), nodes.size)
        frames.append(pd.DataFrame({"time": t, "node": nodes, "y": y}))
    return {"field": field_, "data": pd.concat(frames, ignore_index=True)}


def space_time_effect(sc: SpaceTimeScenario) -> EffectSpec:
    return EffectSpec("kronecker", children=(
        EffectSpec("ar1", size=sc.time_nodes, hyper_names={"rho": "ar_rho"}),
        EffectSpec("lattice_matern", grid=(sc.nx, sc.ny), spacing=sc.spacing,
                   hyper_names={"range": "st_range", "sd": "st_sd"}),
    ))


def space_time_model_config(sc: SpaceTimeScenario) -> dict:
    per = sc.time_nodes // sc.groups
    return {
        "effects": {"st": {"kind": "kronecker", "children": [
            {"kind": "ar1", "size": sc.time_nodes, "hyper_names": {"rho": "ar_rho"}},
            {"kind": "lattice_matern", "grid": [sc.nx, sc.ny], "spacing": sc.spacing,
             "hyper_names": {"range": "st_range", "sd": "st_sd"}}]}},
        "fixed": [{"name": "b0"}],
        "hyper_priors": {
            "obs_prec": {"dist": "normal", "mean": 0.0, "sd": 2.0},
            "ar_rho": {"dist": "normal", "mean": 1.0, "sd": 1.0},
            "st_range": {"dist": "normal", "mean": float(np.log(2.0)), "sd": 1.0},
            "st_sd": {"dist": "normal", "mean": 0.0, "sd": 1.0},
        },
        "blocks": [{"name": "obs", "family": "gaussian", "response": "y", "hyper": {"prec": "obs_prec"},
                    "predictor": [{"intercept": "b0"}, {"effect": "st", "index": ["time", "node"]}]}],
        "partition": {"mode": "by_time_blocks", "time_column": "time",
                      "groups": [list(range(g * per, (g + 1) * per)) for g in range(sc.groups)]},
    }
