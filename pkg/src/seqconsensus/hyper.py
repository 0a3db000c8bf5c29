"""Hyperparameter transforms, priors and grid posteriors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gammaln, logsumexp

from .model import HyperPrior

# internal (unconstrained) scale -> natural scale, per role
_TO_NATURAL = {
    "prec": np.exp,
    "range": np.exp,
    "sd": np.exp,
    "rho": np.tanh,
    "alpha": lambda v: v,
}
_TO_INTERNAL = {
    "prec": np.log,
    "range": np.log,
    "sd": np.log,
    "rho": np.arctanh,
    "alpha": lambda v: v,
}


def to_natural(role: str, value: float) -> float:
    return float(_TO_NATURAL[role](value))


def to_internal(role: str, value: float) -> float:
    return float(_TO_INTERNAL[role](value))


def prior_logpdf(prior: HyperPrior, theta: float) -> float:
    """Log density of an internal-scale value under ``prior``."""
    p = prior.params
    if prior.dist == "normal":
        z = (theta - p["mean"]) / p["sd"]
        return float(-0.5 * z * z - np.log(p["sd"]) - 0.5 * np.log(2 * np.pi))
    if prior.dist == "loggamma":
        a, b = p["shape"], p["rate"]
        return float(a * np.log(b) - gammaln(a) + a * theta - b * np.exp(theta))
    if prior.dist == "flat":
        return 0.0
    raise ValueError(f"prior {prior.dist!r} has no density")


def prior_start(prior: HyperPrior) -> float:
    p = prior.params
    if prior.dist == "normal":
        return p["mean"]
    if prior.dist == "loggamma":
        return float(np.log(p["shape"] / p["rate"]))
    return float(p.get("initial", 0.0))


@dataclass
class HyperGridPosterior:
    """Hyperparameter posterior on a tensor grid of internal-scale points.

    ``log_density`` is normalised so that ``sum(weights * exp(log_density)) == 1``.
    """

    names: list
    axes: list
    log_density: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def points(self) -> np.ndarray:
        if not self.axes:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def probabilities(self) -> np.ndarray:
        """Normalised probability mass of each support point."""
        lw = np.log(self.weights) + self.log_density
        return np.exp(lw - logsumexp(lw))

    def normalization_error(self) -> float:
        return abs(float(np.sum(self.weights * np.exp(self.log_density))) - 1.0)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.probabilities()
        pts = self.points
        mean = p @ pts
        var = p @ (pts - mean) ** 2
        return mean, np.sqrt(var)

    def marginal(self, name: str) -> "HyperGridPosterior":
        k = self.names.index(name)
        dens = (self.weights * np.exp(self.log_density)).reshape(self.shape)
        other = tuple(i for i in range(self.dim) if i != k)
        m = dens.sum(axis=other) if other else dens
        step = _axis_step(self.axes[k])
        m = np.maximum(m / (np.sum(m) * step), 1e-300)
        return HyperGridPosterior([name], [self.axes[k].copy()], np.log(m),
                                  np.full(m.size, step), np.array([self.mode[k]]))

    def _gaussian_kernel(self):
        """Centre and precision of a Gaussian matched to the grid moments."""
        p = self.probabilities()
        pts = self.points
        mean = p @ pts
        d = pts - mean
        cov = (d * p[:, None]).T @ d
        flat = np.array([len(a) == 1 for a in self.axes])
        prec = np.zeros((self.dim, self.dim))
        keep = np.flatnonzero(~flat)
        if keep.size:
            sub = cov[np.ix_(keep, keep)]
            try:
                np.linalg.cholesky(sub)
                prec[np.ix_(keep, keep)] = np.linalg.inv(sub)
            except np.linalg.LinAlgError:
                prec[keep, keep] = 1.0 / np.maximum(np.diag(sub), 1e-12)
        return mean, prec

    def logpdf(self, theta) -> float:
        """Interpolated log density.

        A Gaussian kernel matched to the grid moments carries the curvature;
        the residual at the support points is interpolated multilinearly, so
        the result is exact at the points and Gaussian outside the grid.
        """
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.dim == 0:
            return 0.0
        cached = self.extras.get("_interp")
        if cached is None:
            mean, prec = self._gaussian_kernel()
            d = self.points - mean
            kernel = -0.5 * np.einsum("ij,jk,ik->i", d, prec, d)
            axes = [a if len(a) > 1 else np.array([a[0] - 1.0, a[0] + 1.0]) for a in self.axes]
            values = (self.log_density - kernel).reshape(self.shape)
            for k, a in enumerate(self.axes):
                if len(a) == 1:
                    values = np.repeat(values, 2, axis=k)
            cached = (RegularGridInterpolator(axes, values, method="linear"), mean, prec)
            self.extras["_interp"] = cached
        interp, mean, prec = cached
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        clamped = np.clip(theta, lo, hi)
        d = theta - mean
        return float(interp(clamped[None, :])[0] - 0.5 * d @ prec @ d)

    def summary(self, roles: Optional[Mapping[str, str]] = None) -> list[dict]:
        """Per-name marginal mean, sd and mode on the internal scale."""
        mean, sd = self.moments()
        out = []
        for k, name in enumerate(self.names):
            row = {"name": name, "mean": float(mean[k]), "sd": float(sd[k]),
                   "mode": float(self.mode[k])}
            if roles is not None:
                row["role"] = roles.get(name)
            out.append(row)
        return out


def _axis_step(axis: np.ndarray) -> float:
    return float(axis[1] - axis[0]) if len(axis) > 1 else 1.0


def tensor_grid(mode: np.ndarray, sd: np.ndarray, n_points: int, span: float):
    z = np.linspace(-span, span, n_points) if n_points > 1 else np.zeros(1)
    axes = [m + z * s for m, s in zip(mode, sd)]
    steps = np.array([_axis_step(a) for a in axes])
    weight = float(np.prod(steps)) if len(axes) else 1.0
    return axes, weight


def normalize(log_post: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return log_post - logsumexp(log_post + np.log(weights))


class PriorSet:
    """Joint prior over named internal-scale hyperparameters.

    Each name gets either a ``HyperPrior`` or a 1-D ``HyperGridPosterior``
    (from a previous step); a multi-dimensional ``HyperGridPosterior`` can
    cover several names jointly.
    """

    def __init__(self, names: Sequence[str], base: Mapping[str, HyperPrior],
                 overrides=None):
        self.names = list(names)
        self.base = dict(base)
        self.single: dict = {}
        self.joint: Optional[HyperGridPosterior] = None
        self.joint_idx: list = []
        if isinstance(overrides, HyperGridPosterior):
            self._add_grid(overrides)
        elif overrides:
            for name, pr in overrides.items():
                if name not in self.names:
                    continue
                if isinstance(pr, HyperGridPosterior) and pr.dim > 1:
                    raise ValueError("per-name prior must be one-dimensional")
                self.single[name] = pr

    def _add_grid(self, grid: HyperGridPosterior):
        common = [n for n in grid.names if n in self.names]
        if common == list(grid.names):
            self.joint = grid
            self.joint_idx = [self.names.index(n) for n in grid.names]
        else:
            for n in common:
                self.single[n] = grid.marginal(n)

    def logpdf(self, theta: np.ndarray) -> float:
        total = 0.0
        covered = set()
        if self.joint is not None:
            total += self.joint.logpdf(theta[self.joint_idx])
            covered.update(self.joint.names)
        for k, name in enumerate(self.names):
            if name in covered:
                continue
            pr = self.single.get(name, self.base[name])
            if isinstance(pr, HyperGridPosterior):
                total += pr.logpdf([theta[k]])
            else:
                total += prior_logpdf(pr, theta[k])
        return total

    def start(self) -> np.ndarray:
        out = np.zeros(len(self.names))
        for k, name in enumerate(self.names):
            pr = self.single.get(name, self.base[name])
            if self.joint is not None and name in self.joint.names:
                out[k] = self.joint.mode[self.joint.names.index(name)]
            elif isinstance(pr, HyperGridPosterior):
                out[k] = pr.mode[0]
            else:
                out[k] = prior_start(pr)
        return out
