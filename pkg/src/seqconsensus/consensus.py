"""Pooling of Gaussian posteriors fitted on separate data partitions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .gmrf import FactorizationError, GaussianDensity, factorize, kriging_correction
from .infer import GaussianMarginal


class ConsensusError(ValueError):
    """Inputs cannot be pooled (shape mismatch or a non positive definite result)."""


@dataclass(frozen=True)
class ExpertWeights:
    """Externally supplied per-model weights; positive and summing to one."""

    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("expert weights must be a non-empty vector")
        if np.any(w <= 0):
            raise ValueError("expert weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"expert weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))


def combine_marginals(marginals: Sequence[GaussianMarginal],
                      expert: Optional[ExpertWeights] = None) -> GaussianMarginal:
    if not marginals:
        raise ConsensusError("nothing to combine")
    mu = np.array([m.mean for m in marginals], dtype=float)
    tau = np.array([m.precision for m in marginals], dtype=float)
    if np.any(~(tau > 0)):
        raise ConsensusError("all precisions must be positive")
    if expert is None:
        # sorting makes the sums independent of input order
        order = np.lexsort((mu, tau))
        mu, tau = mu[order], tau[order]
        total = float(np.sum(tau))
        return GaussianMarginal(float(np.sum(tau * mu) / total), total)
    ew = np.asarray(expert.weights)
    if ew.size != len(marginals):
        raise ConsensusError(f"{ew.size} expert weights for {len(marginals)} models")
    w = ew * tau / tau.sum()
    w = w / w.sum()
    return GaussianMarginal(float(w @ mu), float(1.0 / np.sum(w * w / tau)))


def _check_same_layout(densities: Sequence[GaussianDensity]) -> None:
    first = densities[0]
    for d in densities[1:]:
        if d.dim != first.dim:
            raise ConsensusError(f"dimension mismatch: {first.dim} vs {d.dim}")
        if list(d.node_labels) != list(first.node_labels):
            raise ConsensusError("node labellings differ between densities")


def _smallest_eigenvalue(Q) -> float:
    if sp.issparse(Q) and Q.shape[0] > 400:
        try:
            return float(eigsh(Q, k=1, which="SA", return_eigenvectors=False, maxiter=5000)[0])
        except ArpackNoConvergence as exc:
            return float(np.min(exc.eigenvalues)) if len(exc.eigenvalues) else float("nan")
    M = Q.toarray() if sp.issparse(Q) else np.asarray(Q)
    return float(np.linalg.eigvalsh(M)[0])


def combine_multivariate(densities: Sequence[GaussianDensity], prior: Optional[GaussianDensity] = None,
                         correct_prior: bool = False) -> GaussianDensity:
    """Product of Gaussian densities over the same nodes.

    With ``correct_prior`` the shared ``prior`` (used once in each of the n
    fits) is divided out n-1 times so that it is counted once.
    """
    if not densities:
        raise ConsensusError("nothing to combine")
    _check_same_layout(densities)
    n = len(densities)
    any_dense = any(not sp.issparse(d.precision) for d in densities)

    def as_op(P):
        if any_dense:
            return P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
        return sp.csr_matrix(P)

    Q = as_op(densities[0].precision)
    b = Q @ densities[0].mean
    for d in densities[1:]:
        P = as_op(d.precision)
        Q = Q + P
        b = b + P @ d.mean
    if correct_prior and n > 1:
        if prior is None:
            raise ConsensusError("prior correction requested without a prior")
        if prior.dim != densities[0].dim:
            raise ConsensusError(f"prior has dimension {prior.dim}, densities {densities[0].dim}")
        Q0 = as_op(prior.precision)
        Q = Q - (n - 1) * Q0
        b = b - (n - 1) * (Q0 @ prior.mean)
    if sp.issparse(Q):
        Q = sp.csr_matrix(Q)
        Q.eliminate_zeros()
    else:
        Q = 0.5 * (Q + Q.T)
    try:
        F = factorize(Q)
    except FactorizationError:
        lam = _smallest_eigenvalue(Q)
        raise ConsensusError(
            f"pooled precision is not positive definite (smallest eigenvalue ~ {lam:.3e}); "
            "the prior dominates the partition posteriors") from None
    mean = F.solve(b)
    C = densities[0].constraints
    if C is not None:
        mean = kriging_correction(F, mean, C)
    return GaussianDensity(mean, Q, list(densities[0].node_labels), C)


@dataclass(frozen=True)
class NodeMarginal(GaussianMarginal):
    """Per-node summary: ``precision`` is the diagonal of Q, ``exact_precision`` is 1/(Q^-1)_ii."""

    exact_precision: float = float("nan")

    @property
    def exact(self) -> GaussianMarginal:
        return GaussianMarginal(self.mean, self.exact_precision)


def marginals_from_multivariate(density: GaussianDensity) -> list[NodeMarginal]:
    Q = density.precision
    diag = Q.diagonal() if sp.issparse(Q) else np.diag(np.asarray(Q))
    var = density.variances()
    return [NodeMarginal(float(m), float(q), float(1.0 / v))
            for m, q, v in zip(density.mean, diag, var)]
