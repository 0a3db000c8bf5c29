"""Laplace-approximation inference for a single latent Gaussian (sub-)model.

The latent vector stacks the fixed effects (in declaration order) followed by
every structured effect.  For fixed hyperparameters the posterior of the
latent field is approximated by a Gaussian at its mode (Newton with step
halving); the hyperparameter posterior is represented on a tensor grid.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .families import DomainError, check_response, loglik_terms
from .gmrf import (FactorizationError, GaussianDensity, build_effect_precision,
                   effect_constraints, factorize, stack_constraints)
from .hyper import (HyperGridPosterior, PriorSet, normalize, tensor_grid, to_internal,
                    to_natural)
from .model import ModelSpec, check_data

MAX_NEWTON = 50
NEWTON_TOL = 1e-8
MAX_HALVINGS = 30
MAX_THETA_DIM = 5


class InferenceError(RuntimeError):
    """Numerical failure while fitting (divergence, non-finite likelihood, failed search)."""


@dataclass(frozen=True)
class GaussianMarginal:
    mean: float
    precision: float

    def __post_init__(self):
        if not self.precision > 0:
            raise ValueError(f"precision must be positive, got {self.precision}")

    @property
    def sd(self) -> float:
        return float(1.0 / np.sqrt(self.precision))

    @property
    def variance(self) -> float:
        return float(1.0 / self.precision)


@dataclass
class _Block:
    family: str
    y: np.ndarray
    offset: np.ndarray
    prec_name: Optional[str]
    rows: slice


@dataclass
class LaplaceResult:
    mode: np.ndarray
    hessian: object
    factor: object
    loglik: float
    log_ml: float
    iterations: int
    prior: GaussianDensity


class LatentModel:
    """Design matrices and prior assembly for one ``ModelSpec`` and its data."""

    def __init__(self, spec: ModelSpec, data, fixed_priors: Optional[Mapping] = None,
                 node_maps: Optional[Mapping] = None):
        self.spec = spec
        tables = check_data(spec, data)
        self.roles = spec.theta_roles()
        self.free_names = spec.free_theta_names()
        if len(self.free_names) > MAX_THETA_DIM:
            raise InferenceError(
                f"{len(self.free_names)} free hyperparameters; at most {MAX_THETA_DIM} supported")
        self.fixed_values = {n: spec.hyper_priors[n].params["value"]
                             for n in self.roles if spec.hyper_priors[n].dist == "fixed"}

        self.fixed_names = spec.fixed_names()
        self.offsets: dict[str, int] = {}
        pos = len(self.fixed_names)
        for name, e in spec.effects.items():
            self.offsets[name] = pos
            pos += e.dim
        self.n = pos
        node_maps = node_maps or {}
        self.labels = [("fixed", f) for f in self.fixed_names]
        for name, e in spec.effects.items():
            gmap = node_maps.get(name, np.arange(e.dim))
            self.labels += [(name, int(g)) for g in gmap]

        fp = dict(fixed_priors or {})
        self.beta_mean = np.array([fp[f.name].mean if f.name in fp else f.mean
                                   for f in spec.fixed_effects], dtype=float)
        self.beta_prec = np.array([fp[f.name].precision if f.name in fp else f.precision
                                   for f in spec.fixed_effects], dtype=float)

        self.blocks: list[_Block] = []
        base_parts, share_parts = [], {}
        start = 0
        for bi, b in enumerate(spec.blocks):
            df = tables[b.table]
            y = df[b.response].to_numpy(dtype=float)
            check_response(b.family, y)
            m = len(y)
            off = df[b.offset].to_numpy(dtype=float) if b.offset else np.zeros(m)
            rows_i, cols_i, vals_i = [], [], []
            share_rows: dict[str, tuple] = {}
            for t in b.predictor:
                if t.kind == "intercept":
                    j = self.fixed_names.index(t.name)
                    rows_i.append(np.arange(m)); cols_i.append(np.full(m, j)); vals_i.append(np.ones(m))
                elif t.kind == "covariate":
                    j = self.fixed_names.index(t.name)
                    rows_i.append(np.arange(m)); cols_i.append(np.full(m, j))
                    vals_i.append(df[t.column].to_numpy(dtype=float))
                else:
                    e = spec.effects[t.name]
                    idx = [df[c].to_numpy() for c in t.index]
                    if e.kind == "kronecker":
                        local = idx[0].astype(int) * e.children[1].dim + idx[1].astype(int)
                    else:
                        local = idx[0].astype(int)
                    if np.any(local < 0) or np.any(local >= e.dim):
                        raise ValueError(f"block {b.name!r}: index out of range for effect {t.name!r}")
                    cols = self.offsets[t.name] + local
                    scale = t.scale
                    if t.kind == "share":
                        link = spec.share_for(t.name, bi)
                        if link.estimated:
                            share_rows.setdefault(link.alpha_name, ([], [], []))
                            r, c, v = share_rows[link.alpha_name]
                            r.append(np.arange(m)); c.append(cols); v.append(np.full(m, scale))
                            continue
                        scale = scale * link.fixed_alpha
                    rows_i.append(np.arange(m)); cols_i.append(cols); vals_i.append(np.full(m, scale))
            base_parts.append(_coo(rows_i, cols_i, vals_i, m, self.n))
            for alpha, (r, c, v) in share_rows.items():
                share_parts.setdefault(alpha, {})[bi] = _coo(r, c, v, m, self.n)
            self.blocks.append(_Block(b.family, y, off, b.hyper.get("prec"), slice(start, start + m)))
            start += m
        self.m = start
        self.A_base = sp.csr_matrix(sp.vstack(base_parts)) if base_parts else sp.csr_matrix((0, self.n))
        self.A_share = {}
        for alpha, parts in share_parts.items():
            mats = [parts.get(bi, sp.csr_matrix((blk.rows.stop - blk.rows.start, self.n)))
                    for bi, blk in enumerate(self.blocks)]
            self.A_share[alpha] = sp.csr_matrix(sp.vstack(mats))
        self.offset = np.concatenate([b.offset for b in self.blocks]) if self.blocks else np.zeros(0)
        self.all_gaussian = all(b.family == "gaussian" for b in self.blocks)
        self.constraints = stack_constraints(
            [(self.offsets[n], effect_constraints(e)) for n, e in spec.effects.items()],
            self.n)
        self._prior_cache: dict = {}

    # ------------------------------------------------------------------ theta

    def natural(self, theta) -> dict:
        """Natural-scale hyperparameter values (free ones from ``theta``, plus fixed)."""
        out = dict(self.fixed_values)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        for k, name in enumerate(self.free_names):
            out[name] = to_natural(self.roles[name], theta[k])
        return out

    def design(self, nat: Mapping[str, float]) -> sp.csr_matrix:
        A = self.A_base
        for alpha, As in self.A_share.items():
            A = A + nat[alpha] * As
        return sp.csr_matrix(A)

    def effect_prior(self, name: str, nat: Mapping[str, float]):
        e = self.spec.effects[name]
        key = (name,) + tuple(nat[n] for n in e.theta_names())
        hit = self._prior_cache.get(key)
        if hit is None:
            P = build_effect_precision(e, nat)
            Q = P.regularized()
            F = factorize(Q)
            logdet = F.logdet()
            cterm = 0.0
            if P.constraints is not None:
                W = F.solve(P.constraints.T)
                cterm = 0.5 * np.linalg.slogdet(P.constraints @ W)[1]
            hit = (Q, P.constraints, logdet, cterm)
            if len(self._prior_cache) > 512:
                self._prior_cache.clear()
            self._prior_cache[key] = hit
        return hit

    def latent_prior(self, theta) -> GaussianDensity:
        nat = self.natural(theta)
        mats = [sp.diags(self.beta_prec)] if self.fixed_names else []
        for name in self.spec.effects:
            mats.append(self.effect_prior(name, nat)[0])
        Q = sp.csr_matrix(sp.block_diag(mats, format="csr")) if mats else sp.csr_matrix((0, 0))
        mean = np.concatenate([self.beta_mean, np.zeros(self.n - len(self.fixed_names))])
        return GaussianDensity(mean, Q, list(self.labels), self.constraints)

    def _prior_logdet_terms(self, theta) -> float:
        """0.5 log|Q| + 0.5 log|A Q^{-1} A^T| of the default latent prior."""
        nat = self.natural(theta)
        total = 0.5 * float(np.sum(np.log(self.beta_prec)))
        for name in self.spec.effects:
            _, _, logdet, cterm = self.effect_prior(name, nat)
            total += 0.5 * logdet + cterm
        return total

    # ------------------------------------------------------------------ likelihood

    def loglik(self, eta: np.ndarray, nat: Mapping[str, float], derivs: bool = True):
        ll = np.empty(self.m)
        g1 = np.empty(self.m)
        g2 = np.empty(self.m)
        for b in self.blocks:
            prec = nat[b.prec_name] if b.prec_name else 1.0
            l, d1, d2 = loglik_terms(b.family, b.y, eta[b.rows], prec)
            ll[b.rows], g1[b.rows], g2[b.rows] = l, d1, d2
        return ll, g1, g2

    # ------------------------------------------------------------------ Laplace

    def laplace(self, theta, prior: Optional[GaussianDensity] = None,
                x0: Optional[np.ndarray] = None) -> LaplaceResult:
        nat = self.natural(theta)
        default_prior = prior is None
        if default_prior:
            prior = self.latent_prior(theta)
        Q = prior.precision
        mu = prior.mean
        Cn = prior.constraints
        A = self.design(nat)

        def objective(x):
            eta = A @ x + self.offset
            ll, g1, g2 = self.loglik(eta, nat)
            d = x - mu
            return float(np.sum(ll)) - 0.5 * float(d @ (Q @ d)), ll, g1, g2

        x = mu.copy() if x0 is None else np.array(x0, dtype=float)
        if Cn is not None and x0 is None:
            F0 = factorize(Q)
            x = _project(F0, x, Cn)
        f, ll, g1, g2 = objective(x)
        if not np.isfinite(f):
            raise InferenceError("non-finite log-likelihood at the starting point")
        it = 0
        while True:
            grad = A.T @ g1 - Q @ (x - mu)
            H = sp.csr_matrix(Q + A.T @ sp.diags(-g2) @ A)
            try:
                F = factorize(H)
            except FactorizationError as exc:
                raise InferenceError(f"Newton Hessian not positive definite (pivot {exc.pivot})") from None
            if it >= MAX_NEWTON:
                break
            step = F.solve(grad)
            if Cn is not None:
                step = _project(F, step, Cn)
            s = 1.0
            for _ in range(MAX_HALVINGS + 1):
                fx, llx, g1x, g2x = objective(x + s * step)
                if np.isfinite(fx) and fx >= f - 1e-10 * max(1.0, abs(f)):
                    break
                s *= 0.5
            else:
                raise InferenceError("Newton iteration diverged (step halving exhausted)")
            x = x + s * step
            f, ll, g1, g2 = fx, llx, g1x, g2x
            it += 1
            if self.all_gaussian or np.max(np.abs(s * step)) < NEWTON_TOL:
                # Hessian of a Gaussian likelihood does not depend on x
                if not self.all_gaussian:
                    H = sp.csr_matrix(Q + A.T @ sp.diags(-g2) @ A)
                    F = factorize(H)
                break
        loglik = float(np.sum(ll))
        d = x - mu
        log_ml = loglik - 0.5 * float(d @ (Q @ d)) - 0.5 * F.logdet()
        if default_prior:
            log_ml += self._prior_logdet_terms(theta)
        else:
            Fq = factorize(Q)
            log_ml += 0.5 * Fq.logdet()
            if Cn is not None:
                log_ml += 0.5 * np.linalg.slogdet(Cn @ Fq.solve(Cn.T))[1]
        if Cn is not None:
            log_ml -= 0.5 * np.linalg.slogdet(Cn @ F.solve(Cn.T))[1]
            r = Cn @ mu
            if np.any(r != 0):
                Fq = factorize(Q)
                log_ml += 0.5 * float(r @ np.linalg.solve(Cn @ Fq.solve(Cn.T), r))
        if not np.isfinite(log_ml):
            raise InferenceError("non-finite marginal likelihood")
        return LaplaceResult(x, H, F, loglik, log_ml, it, prior)

    # ------------------------------------------------------------------ summaries

    def fixed_moments(self, res: LaplaceResult) -> tuple[np.ndarray, np.ndarray]:
        k = len(self.fixed_names)
        if k == 0:
            return np.zeros(0), np.zeros(0)
        E = np.zeros((self.n, k))
        E[np.arange(k), np.arange(k)] = 1.0
        W = res.factor.solve(E)
        var = W[np.arange(k), np.arange(k)].copy()
        if self.constraints is not None:
            C = self.constraints
            V = res.factor.solve(C.T)
            Vb = V[:k]
            var -= np.einsum("ij,ji->i", Vb, np.linalg.solve(C @ V, Vb.T))
        return res.mode[:k].copy(), var

    def effect_density(self, res: LaplaceResult, name: str) -> GaussianDensity:
        """Marginal Gaussian of one effect block (Schur complement of the joint precision)."""
        e = self.spec.effects[name]
        o = self.offsets[name]
        idx = np.arange(o, o + e.dim)
        rest = np.setdiff1d(np.arange(self.n), idx)
        H = sp.csr_matrix(res.hessian)
        H_ii = H[idx][:, idx]
        H_ir = H[idx][:, rest]
        if H_ir.nnz == 0:
            P = sp.csr_matrix(H_ii)
        else:
            H_rr = H[rest][:, rest]
            Fr = factorize(sp.csr_matrix(H_rr))
            X = Fr.solve(H_ir.T.toarray())
            P = H_ii.toarray() - H_ir @ X
            P = 0.5 * (P + P.T)
        C = None
        if self.constraints is not None:
            rows = np.flatnonzero(np.any(self.constraints[:, idx] != 0, axis=1))
            if len(rows):
                C = self.constraints[np.ix_(rows, idx)]
        labels = self.labels[o:o + e.dim]
        return GaussianDensity(res.mode[idx].copy(), P, labels, C)


def _coo(rows, cols, vals, m, n):
    if not rows:
        return sp.csr_matrix((m, n))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m, n))


def _project(F, x, C):
    W = F.solve(C.T)
    return x - W @ np.linalg.solve(C @ W, C @ x)


# --------------------------------------------------------------------------- public operations


def gaussian_approx_latent(spec: ModelSpec, data, theta, latent_prior: Optional[GaussianDensity] = None,
                           fixed_priors=None) -> GaussianDensity:
    """Gaussian approximation of the latent field at fixed hyperparameters.

    ``theta`` is either a vector of internal-scale free hyperparameters or a
    mapping of natural-scale values.
    """
    model = LatentModel(spec, data, fixed_priors)
    th = _theta_vector(model, theta)
    res = model.laplace(th, latent_prior)
    return GaussianDensity(res.mode, res.hessian, list(model.labels),
                           latent_prior.constraints if latent_prior is not None else model.constraints)


def log_marginal_likelihood(spec: ModelSpec, data, theta, latent_prior: Optional[GaussianDensity] = None,
                            fixed_priors=None) -> float:
    """Laplace estimate of log p(y | theta)."""
    model = LatentModel(spec, data, fixed_priors)
    return model.laplace(_theta_vector(model, theta), latent_prior).log_ml


def _theta_vector(model: LatentModel, theta) -> np.ndarray:
    if isinstance(theta, Mapping):
        return np.array([to_internal(model.roles[n], theta[n]) for n in model.free_names])
    return np.atleast_1d(np.asarray(theta, dtype=float))


# --------------------------------------------------------------------------- grid exploration


@dataclass
class GridOptions:
    n_points: int = 7
    span: float = 3.0
    step0: float = 1.0
    tol: float = 1e-3
    max_stall: int = 200
    fd_step: float = 0.1
    threads: int = 1


class _Evaluator:
    def __init__(self, model: LatentModel, priors: PriorSet):
        self.model = model
        self.priors = priors
        self.x_warm = None
        self.count = 0

    def logpost(self, theta, x0=None):
        self.count += 1
        res = self.model.laplace(theta, x0=self.x_warm if x0 is None else x0)
        return res.log_ml + self.priors.logpdf(theta), res


def _compass_search(ev: _Evaluator, start: np.ndarray, opts: GridOptions):
    theta = start.copy()
    best, res = ev.logpost(theta)
    ev.x_warm = res.mode
    step = opts.step0
    stall = 0
    d = theta.size
    while step >= opts.tol:
        improved = False
        for k in range(d):
            for sign in (1.0, -1.0):
                trial = theta.copy()
                trial[k] += sign * step
                try:
                    val, r = ev.logpost(trial)
                except (InferenceError, FactorizationError, DomainError, ValueError, FloatingPointError):
                    val = -np.inf
                if val > best + 1e-10:
                    theta, best = trial, val
                    ev.x_warm = r.mode
                    improved = True
                    stall = 0
                    break
                stall += 1
                if stall >= opts.max_stall:
                    raise InferenceError(f"mode search failed to improve for {opts.max_stall} evaluations")
            if improved:
                break
        if not improved:
            step *= 0.5
    return theta, best


def _curvature_sd(ev: _Evaluator, mode: np.ndarray, fmode: float, h: float) -> np.ndarray:
    d = mode.size
    Hm = np.zeros((d, d))
    f = {}

    def at(offsets):
        key = tuple(offsets)
        if key not in f:
            t = mode.copy()
            for k, s in offsets:
                t[k] += s * h
            try:
                f[key] = ev.logpost(t)[0]
            except (InferenceError, FactorizationError, ValueError):
                f[key] = -np.inf
        return f[key]

    for i in range(d):
        Hm[i, i] = (at([(i, 1)]) - 2 * fmode + at([(i, -1)])) / (h * h)
        for j in range(i):
            v = (at([(i, 1), (j, 1)]) - at([(i, 1), (j, -1)])
                 - at([(i, -1), (j, 1)]) + at([(i, -1), (j, -1)])) / (4 * h * h)
            Hm[i, j] = Hm[j, i] = v
    diag = np.diag(Hm)
    if not np.all(np.isfinite(Hm)):
        return np.ones(d)
    try:
        np.linalg.cholesky(-Hm)
        return np.sqrt(np.diag(np.linalg.inv(-Hm)))
    except np.linalg.LinAlgError:
        return np.where(diag < 0, 1.0 / np.sqrt(np.abs(diag)), 1.0)


def explore_hyper_grid(model: LatentModel, hyper_prior=None, fixed_support: Optional[HyperGridPosterior] = None,
                       options: Optional[GridOptions] = None):
    """Locate the hyperparameter posterior mode and evaluate it on a tensor grid.

    Returns ``(grid_posterior, per_point_results)`` where the latter holds the
    fixed-effect means/variances at every support point.
    """
    opts = options or GridOptions()
    names = model.free_names
    priors = PriorSet(names, model.spec.hyper_priors, hyper_prior)
    ev = _Evaluator(model, priors)
    if not names:
        val, res = ev.logpost(np.zeros(0))
        m, v = model.fixed_moments(res)
        grid = HyperGridPosterior([], [], np.zeros(1), np.ones(1), np.zeros(0),
                                  {"log_post": np.array([val])})
        return grid, {"beta_mean": m[None, :], "beta_var": v[None, :], "mode_result": res}

    if fixed_support is not None:
        if list(fixed_support.names) != list(names):
            raise InferenceError("fixed support names do not match the model hyperparameters")
        axes = [a.copy() for a in fixed_support.axes]
        weights = fixed_support.weights.copy()
        mode = fixed_support.mode.copy()
        ev.x_warm = ev.logpost(mode)[1].mode
    else:
        mode, fmode = _compass_search(ev, priors.start(), opts)
        sd = _curvature_sd(ev, mode, fmode, opts.fd_step)
        axes, w = tensor_grid(mode, sd, opts.n_points, opts.span)
        weights = np.full(int(np.prod([len(a) for a in axes])), w)

    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    x_warm = ev.x_warm

    def evaluate(theta):
        val, res = ev.logpost(theta, x0=x_warm)
        m, v = model.fixed_moments(res)
        return val, m, v

    if opts.threads > 1:
        with ThreadPoolExecutor(opts.threads) as pool:
            results = list(pool.map(evaluate, points))
    else:
        results = [evaluate(p) for p in points]
    log_post = np.array([r[0] for r in results])
    if not np.all(np.isfinite(log_post)):
        raise InferenceError("non-finite log posterior on the hyperparameter grid")
    grid = HyperGridPosterior(list(names), axes, normalize(log_post, weights), weights, mode,
                              {"log_post": log_post})
    mode_res = model.laplace(mode, x0=x_warm)
    return grid, {"beta_mean": np.array([r[1] for r in results]),
                  "beta_var": np.array([r[2] for r in results]), "mode_result": mode_res,
                  "evaluations": ev.count}


# --------------------------------------------------------------------------- block fit


@dataclass
class BlockFitResult:
    fixed_marginals: dict
    hyper_posterior: HyperGridPosterior
    effect_densities: dict
    log_marginal_likelihood: float
    wall_time: float
    theta_mode: dict = field(default_factory=dict)
    effect_priors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def fit_block(spec: ModelSpec, data, priors: Optional[Mapping] = None, node_maps=None,
              options: Optional[GridOptions] = None) -> BlockFitResult:
    """Fit one (sub-)model.

    ``priors`` may hold ``fixed`` (name -> GaussianMarginal), ``hyper``
    (per-name priors or a ``HyperGridPosterior``) and ``fixed_support`` (a
    ``HyperGridPosterior`` whose support points are reused).  With
    ``fix_weights`` true the support weights are taken verbatim too.
    """
    priors = dict(priors or {})
    t0 = time.perf_counter()
    model = LatentModel(spec, data, priors.get("fixed"), node_maps)
    support = priors.get("fixed_support")
    if support is not None and priors.get("fix_weights"):
        grid, per_point = _fixed_grid(model, support, options)
    else:
        grid, per_point = explore_hyper_grid(model, priors.get("hyper"), support, options)
    p = grid.probabilities()
    bm, bv = per_point["beta_mean"], per_point["beta_var"]
    fixed = {}
    for k, name in enumerate(model.fixed_names):
        m = float(p @ bm[:, k])
        v = float(p @ (bv[:, k] + bm[:, k] ** 2) - m * m)
        fixed[name] = GaussianMarginal(m, 1.0 / v)
    res = per_point["mode_result"]
    effects = {name: model.effect_density(res, name) for name in spec.effects}
    nat = model.natural(grid.mode)
    eff_priors = {name: model.effect_prior(name, nat)[0] for name in spec.effects}
    if "log_post" in grid.extras and grid.extras["log_post"].size == grid.weights.size:
        lml = float(logsumexp(grid.extras["log_post"] + np.log(grid.weights)))
    else:
        lml = res.log_ml
    wall = time.perf_counter() - t0
    meta = {"effect_density_at": "theta_mode", "evaluations": per_point.get("evaluations")}
    return BlockFitResult(fixed, grid, effects, lml, wall, nat, eff_priors, meta)


def _fixed_grid(model: LatentModel, support: HyperGridPosterior, options):
    """Reuse support points and weights verbatim; only fixed-effect mixing is recomputed."""
    if list(support.names) != list(model.free_names):
        raise InferenceError("fixed support names do not match the model hyperparameters")
    mode_res = model.laplace(support.mode)
    p = support.probabilities()
    ms, vs = [], []
    for theta, pk in zip(support.points, p):
        if pk < 1e-12:
            ms.append(np.zeros(len(model.fixed_names)))
            vs.append(np.zeros(len(model.fixed_names)))
            continue
        r = model.laplace(theta, x0=mode_res.mode)
        m, v = model.fixed_moments(r)
        ms.append(m)
        vs.append(v)
    grid = HyperGridPosterior(list(support.names), [a.copy() for a in support.axes],
                              support.log_density.copy(), support.weights.copy(), support.mode.copy())
    return grid, {"beta_mean": np.array(ms).reshape(len(p), -1),
                  "beta_var": np.array(vs).reshape(len(p), -1), "mode_result": mode_res}
