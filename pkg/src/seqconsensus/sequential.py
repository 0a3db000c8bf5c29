"""Sequential fitting over data partitions followed by pooling of the random effects.

``run_sc`` makes one pass, threading fixed-effect and hyperparameter
posteriors forward as priors.  ``run_scp`` adds a second pass in which each
partition is refitted with the hyperparameter support of the first pass held
fixed and a leave-one-partition-out prior for the fixed effects.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .alpha import AlphaError, AlphaEstimate, alpha_nodes, pool_alpha, rescale_effect
from .consensus import combine_marginals, combine_multivariate, marginals_from_multivariate
from .gmrf import GaussianDensity
from .hyper import HyperGridPosterior
from .infer import BlockFitResult, GaussianMarginal, GridOptions, fit_block
from .model import ModelSpec, PartitionPlan, partition_dataset

POOLING = ("marginal", "multivariate")
ALPHA_ESTIMATORS = ("median", "gaussian")


class SequentialError(RuntimeError):
    """A partition fit failed; ``step`` is its 1-based position in the sequence."""

    def __init__(self, step: int, phase: str, cause: BaseException):
        super().__init__(f"{phase} step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.phase = phase
        self.cause = cause


@dataclass
class SequentialOptions:
    pooling: str = "multivariate"
    correct_prior: bool = False
    alpha_estimator: str = "median"
    rho: float = 0.0
    grid: Optional[GridOptions] = None
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")
        if self.alpha_estimator not in ALPHA_ESTIMATORS:
            raise ValueError(f"alpha_estimator must be one of {ALPHA_ESTIMATORS}")


@dataclass
class SequenceState:
    step: int = 0
    fixed_priors: dict = field(default_factory=dict)
    hyper_marginals: dict = field(default_factory=dict)
    hyper_prior: Optional[HyperGridPosterior] = None
    stored_fits: list = field(default_factory=list)
    fixed_history: list = field(default_factory=list)
    initial_fixed: dict = field(default_factory=dict)


@dataclass
class PooledEffect:
    """Pooled posterior of one effect under both pooling methods."""

    name: str
    node_labels: list
    multivariate: GaussianDensity
    multivariate_marginals: list
    marginal: list
    primary: str
    sources: list

    @property
    def mean(self) -> np.ndarray:
        if self.primary == "multivariate":
            return self.multivariate.mean
        return np.array([m.mean for m in self.marginal])

    @property
    def sd(self) -> np.ndarray:
        if self.primary == "multivariate":
            return np.array([m.exact.sd for m in self.multivariate_marginals])
        return np.array([m.sd for m in self.marginal])


@dataclass
class LocalEffect:
    name: str
    step: int
    density: GaussianDensity

    @property
    def node_labels(self) -> list:
        return self.density.node_labels

    @property
    def mean(self) -> np.ndarray:
        return self.density.mean

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.density.variances())


@dataclass
class AlphaResult:
    name: str
    estimate: AlphaEstimate
    used: float
    copy: str
    step: int


@dataclass
class ConsensusReport:
    mode: str
    pooled: dict
    local: dict
    alphas: dict
    fixed_marginals: dict
    hyper_posterior: HyperGridPosterior
    hyper_marginals: dict
    step_times: list
    total_time: float
    state: SequenceState
    log: list = field(default_factory=list)
    first_pass: Optional["ConsensusReport"] = None

    def effect(self, name: str):
        if name in self.pooled:
            return self.pooled[name]
        if name in self.local:
            return self.local[name]
        raise KeyError(name)

    def effect_names(self) -> list:
        return list(self.pooled) + [n for n in self.local if n not in self.pooled]


# --------------------------------------------------------------------------- prior hand-offs


def update_fixed_prior(posterior_prev: GaussianMarginal) -> GaussianMarginal:
    """The moment-matched posterior of one step is the prior of the next."""
    return GaussianMarginal(posterior_prev.mean, posterior_prev.precision)


def second_pass_prior(hist_prev: GaussianMarginal, final: GaussianMarginal,
                      hist_i: GaussianMarginal) -> GaussianMarginal:
    """Posterior given every partition except partition i.

    Divides the full posterior by the contribution of partition i, which is
    the ratio of the step-i and step-(i-1) posteriors.
    """
    if final == hist_i:  # last partition: the quotient cancels exactly
        return GaussianMarginal(hist_prev.mean, hist_prev.precision)
    tau = hist_prev.precision + final.precision - hist_i.precision
    if not tau > 0:
        raise ValueError(f"leave-one-out precision {tau:g} is not positive; inconsistent history")
    num = (hist_prev.precision * hist_prev.mean + final.precision * final.mean
           - hist_i.precision * hist_i.mean)
    return GaussianMarginal(float(num / tau), float(tau))


# --------------------------------------------------------------------------- helpers


class _RunLog:
    def __init__(self, path: Optional[str]):
        self.records: list = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record):
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _initial_fixed(spec: ModelSpec) -> dict:
    return {f.name: GaussianMarginal(f.mean, f.precision) for f in spec.fixed_effects}


def _product_support(names: list, marginals: dict) -> HyperGridPosterior:
    axes = [marginals[n].axes[0] for n in names]
    mesh = np.meshgrid(*[marginals[n].log_density for n in names], indexing="ij")
    logd = np.sum([m.ravel() for m in mesh], axis=0)
    wmesh = np.meshgrid(*[marginals[n].weights for n in names], indexing="ij")
    weights = np.prod([w.ravel() for w in wmesh], axis=0)
    mode = np.array([marginals[n].mode[0] for n in names])
    return HyperGridPosterior(list(names), axes, logd, weights, mode)


def _global_name(part, name: str) -> str:
    return part.copies[name][0] if name in part.copies else name


def _relabel(density: GaussianDensity, name: str) -> GaussianDensity:
    labels = [(name, lbl[1]) for lbl in density.node_labels]
    return GaussianDensity(density.mean, density.precision, labels, density.constraints)


def _prior_density(fit: BlockFitResult, name: str, density: GaussianDensity, label: str):
    Q = fit.effect_priors[name]
    return GaussianDensity(np.zeros(density.dim), Q, [(label, lbl[1]) for lbl in density.node_labels],
                           density.constraints)


def _pool(name, entries, opts: SequentialOptions) -> PooledEffect:
    """``entries`` are ``(step, density, prior)`` triples over identical nodes."""
    dens = [d for _, d, _ in entries]
    if len(dens) == 1:
        multi = dens[0]
    else:
        multi = combine_multivariate(dens, entries[-1][2], opts.correct_prior)
    per_part = [marginals_from_multivariate(d) for d in dens]
    marg = [combine_marginals([pm[k].exact for pm in per_part]) for k in range(dens[0].dim)]
    return PooledEffect(name, list(dens[0].node_labels), multi, marginals_from_multivariate(multi),
                        marg, opts.pooling, [s for s, _, _ in entries])


def _consensus(parts, fits, opts: SequentialOptions, log: _RunLog, phase: str):
    direct: dict = {}
    copies: dict = {}
    local: dict = {}
    for step, (part, fit) in enumerate(zip(parts, fits), 1):
        for name, dens in fit.effect_densities.items():
            if name in part.local_effects:
                local[name if name not in local else f"{name}#{step}"] = LocalEffect(name, step, dens)
                continue
            gname = _global_name(part, name)
            prior = _prior_density(fit, name, dens, gname)
            if name in part.copies:
                copies.setdefault(gname, []).append((step, name, part.copies[name][1], dens, prior))
            else:
                direct.setdefault(gname, []).append((step, _relabel(dens, gname), prior))

    pooled, alphas = {}, {}
    for gname, entries in direct.items():
        pooled[gname] = _pool(gname, entries, opts)
    for gname, items in copies.items():
        if gname not in pooled:
            raise SequentialError(items[0][0], phase, ValueError(
                f"scaled copy of {gname!r} has no partition using {gname!r} directly"))
        base = pooled[gname]
        entries = list(direct[gname])
        for step, cname, link, dens, prior in items:
            src = base.multivariate if opts.pooling == "multivariate" else GaussianDensity(
                base.mean, np.diag(1.0 / base.sd ** 2), base.node_labels)
            try:
                est = pool_alpha(alpha_nodes(dens, src, opts.rho))
            except AlphaError as exc:
                raise SequentialError(step, phase, exc) from None
            used = est.point if opts.alpha_estimator == "median" else est.gaussian.mean
            alphas[link.alpha_name] = AlphaResult(link.alpha_name, est, used, cname, step)
            log.write(phase=phase, event="alpha", name=link.alpha_name, point=est.point,
                      gaussian_mean=est.gaussian.mean, gaussian_sd=est.gaussian.sd,
                      nodes=est.node_count, used=used)
            scaled = _relabel(rescale_effect(dens, used), gname)
            entries.append((step, scaled, _relabel(rescale_effect(prior, used), gname)))
        entries.sort(key=lambda e: e[0])
        pooled[gname] = _pool(gname, entries, opts)
    return pooled, local, alphas


def _fit(part, priors, opts, step, phase):
    try:
        return fit_block(part.spec, part.data, priors, part.node_maps, opts.grid)
    except Exception as exc:  # surfaced with the failing step
        raise SequentialError(step, phase, exc) from exc


# --------------------------------------------------------------------------- algorithms


def run_sc(spec: ModelSpec, data, plan: Optional[PartitionPlan] = None,
           options: Optional[SequentialOptions] = None, _log: Optional[_RunLog] = None) -> ConsensusReport:
    """Single sequential pass followed by consensus of the random effects."""
    opts = options or SequentialOptions()
    log = _log or _RunLog(opts.log_path)
    t_start = time.perf_counter()
    parts = partition_dataset(spec, data, plan)
    state = SequenceState(fixed_priors=_initial_fixed(spec))
    state.initial_fixed = dict(state.fixed_priors)
    step_times = []
    for step, part in enumerate(parts, 1):
        priors = {
            "fixed": {f.name: state.fixed_priors[f.name] for f in part.spec.fixed_effects},
            "hyper": {n: state.hyper_marginals[n] for n in part.spec.free_theta_names()
                      if n in state.hyper_marginals},
        }
        fit = _fit(part, priors, opts, step, "sc")
        for name, marg in fit.fixed_marginals.items():
            state.fixed_priors[name] = update_fixed_prior(marg)
        grid = fit.hyper_posterior
        for name in grid.names:
            state.hyper_marginals[name] = grid.marginal(name)
        state.hyper_prior = grid
        state.stored_fits.append(fit)
        state.fixed_history.append(dict(state.fixed_priors))
        state.step = step
        step_times.append(fit.wall_time)
        log.write(phase="sc", event="step", step=step, wall_time=round(fit.wall_time, 3),
                  log_marginal_likelihood=fit.log_marginal_likelihood,
                  theta=list(grid.names), evaluations=fit.metadata.get("evaluations"))
    t_pool = time.perf_counter()
    pooled, local, alphas = _consensus(parts, state.stored_fits, opts, log, "sc")
    pool_time = time.perf_counter() - t_pool
    total = time.perf_counter() - t_start
    log.write(phase="sc", event="consensus", wall_time=round(pool_time, 3), total=round(total, 3))
    return ConsensusReport("sc", pooled, local, alphas, dict(state.fixed_priors), state.hyper_prior,
                           dict(state.hyper_marginals), step_times, total, state, log.records)


def run_scp(spec: ModelSpec, data, plan: Optional[PartitionPlan] = None,
            options: Optional[SequentialOptions] = None,
            sc_report: Optional[ConsensusReport] = None) -> ConsensusReport:
    """Second pass with fixed hyperparameter support and leave-one-out fixed-effect priors."""
    opts = options or SequentialOptions()
    log = _RunLog(opts.log_path)
    if sc_report is None:
        sc_report = run_sc(spec, data, plan, opts, log)
    else:
        log.records.extend(sc_report.log)
    t_start = time.perf_counter()
    parts = partition_dataset(spec, data, plan)
    sc_state = sc_report.state
    if len(parts) != len(sc_state.stored_fits):
        raise ValueError("first-pass report does not match the partition plan")
    final_grid = sc_state.hyper_prior
    history = [sc_state.initial_fixed] + sc_state.fixed_history
    final_fixed = history[-1]
    fits, step_times = [], []
    for step, part in enumerate(parts, 1):
        fixed = {}
        for f in part.spec.fixed_effects:
            try:
                fixed[f.name] = second_pass_prior(history[step - 1][f.name], final_fixed[f.name],
                                                  history[step][f.name])
            except ValueError as exc:
                raise SequentialError(step, "scp", exc) from None
        names = part.spec.free_theta_names()
        if final_grid is not None and list(final_grid.names) == list(names):
            support = final_grid
        else:
            support = _product_support(names, sc_state.hyper_marginals)
        priors = {"fixed": fixed, "fixed_support": support, "fix_weights": True}
        fit = _fit(part, priors, opts, step, "scp")
        fits.append(fit)
        step_times.append(fit.wall_time)
        log.write(phase="scp", event="step", step=step, wall_time=round(fit.wall_time, 3),
                  log_marginal_likelihood=fit.log_marginal_likelihood, theta=list(names))
    pooled, local, alphas = _consensus(parts, fits, opts, log, "scp")
    total = time.perf_counter() - t_start
    log.write(phase="scp", event="consensus", total=round(total, 3))
    state = SequenceState(len(parts), dict(final_fixed), dict(sc_state.hyper_marginals), final_grid,
                          fits, list(sc_state.fixed_history), dict(sc_state.initial_fixed))
    return ConsensusReport("scp", pooled, local, alphas, dict(final_fixed), final_grid,
                           dict(sc_state.hyper_marginals), step_times, total, state, log.records,
                           first_pass=sc_report)
