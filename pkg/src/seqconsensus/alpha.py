"""Post-hoc estimation of the scaling between a shared effect and its scaled copy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .consensus import combine_marginals
from .gmrf import GaussianDensity
from .infer import GaussianMarginal

MIN_DENOMINATOR_Z = 2.0
MIN_NODES = 3


class AlphaError(ValueError):
    """Ratio approximation is invalid or too few usable nodes."""


@dataclass(frozen=True)
class AlphaEstimate:
    gaussian: GaussianMarginal
    point: float
    node_count: int
    dropped: int = 0


def ratio_gaussian_approx(num: GaussianMarginal, den: GaussianMarginal, rho: float = 0.0,
                          variance: str = "delta") -> GaussianMarginal:
    """Second-order Gaussian approximation of ``num / den``.

    ``variance="delta"`` uses the standard delta-method variance
    ``m1^2 / (t0 m0^4) + 1 / (t1 m0^2) - 2 rho m1 / (m0^3 sqrt(t0 t1))``;
    ``"squared-precision"`` squares ``t0`` in the first term.
    """
    if not -1.0 <= rho <= 1.0:
        raise AlphaError(f"correlation {rho} outside [-1, 1]")
    m1, t1 = num.mean, num.precision
    m0, t0 = den.mean, den.precision
    if abs(m0) * np.sqrt(t0) < MIN_DENOMINATOR_Z:
        raise AlphaError(
            f"denominator N({m0:g}, prec={t0:g}) too close to zero for the ratio approximation")
    cross = rho / np.sqrt(t0 * t1)
    mean = m1 / m0 + m1 / (t0 * m0 ** 3) - cross / m0 ** 2
    if variance == "delta":
        first = m1 ** 2 / (t0 * m0 ** 4)
    elif variance == "squared-precision":
        first = m1 ** 2 / (t0 ** 2 * m0 ** 4)
    else:
        raise ValueError(f"unknown variance form {variance!r}")
    var = first + 1.0 / (t1 * m0 ** 2) - 2.0 * cross * m1 / m0 ** 3
    if not var > 0:
        raise AlphaError(f"ratio variance {var:g} is not positive (check rho)")
    return GaussianMarginal(float(mean), float(1.0 / var))


def pool_alpha(nodes: Sequence[tuple], variance: str = "delta") -> AlphaEstimate:
    """Pool per-node ratio approximations; nodes are ``(num, den, rho)`` triples."""
    approx, ratios = [], []
    for num, den, rho in nodes:
        if den.mean != 0:
            ratios.append(num.mean / den.mean)
        if abs(den.mean) * np.sqrt(den.precision) < MIN_DENOMINATOR_Z:
            continue
        try:
            approx.append(ratio_gaussian_approx(num, den, rho, variance))
        except AlphaError:
            continue
    if len(approx) < MIN_NODES:
        raise AlphaError(f"only {len(approx)} usable nodes; need at least {MIN_NODES}")
    return AlphaEstimate(combine_marginals(approx), float(np.median(ratios)), len(approx),
                         len(nodes) - len(approx))


def alpha_nodes(scaled: GaussianDensity, source: GaussianDensity, rho=0.0) -> list[tuple]:
    """Per-node ``(num, den, rho)`` from exact marginals of two effect densities."""
    if scaled.dim != source.dim:
        raise AlphaError(f"effects have {scaled.dim} and {source.dim} nodes")
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (scaled.dim,))
    vs, vd = scaled.variances(), source.variances()
    return [(GaussianMarginal(float(a), float(1.0 / va)), GaussianMarginal(float(b), float(1.0 / vb)),
             float(r))
            for a, va, b, vb, r in zip(scaled.mean, vs, source.mean, vd, rho)]


def rescale_effect(density: GaussianDensity, alpha: float) -> GaussianDensity:
    """Density of ``x / alpha`` when ``x`` follows ``density``."""
    if alpha == 0:
        raise AlphaError("cannot rescale by alpha = 0")
    P = density.precision
    P = sp.csr_matrix(P * alpha ** 2) if sp.issparse(P) else np.asarray(P) * alpha ** 2
    return GaussianDensity(density.mean / alpha, P, list(density.node_labels), density.constraints)
