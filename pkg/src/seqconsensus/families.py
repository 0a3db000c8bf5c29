"""Observation models: log-likelihood and its first two derivatives in the predictor."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln, log1p


class DomainError(ValueError):
    """Response value outside the support of the likelihood family."""


def lgcp_lattice_loglik(counts, eta, areas) -> float:
    """Poisson lattice approximation of the LGCP log-likelihood.

    sum_i c_i (eta_i + log a_i) - exp(eta_i) a_i - log(c_i!)
    """
    c = np.asarray(counts, dtype=float)
    eta = np.asarray(eta, dtype=float)
    a = np.asarray(areas, dtype=float)
    if not (c.shape == eta.shape == a.shape):
        raise ValueError("counts, eta and areas must have equal lengths")
    if np.any(c < 0):
        raise DomainError("negative counts")
    if np.any(a <= 0):
        raise ValueError("cell areas must be positive")
    return float(np.sum(c * (eta + np.log(a)) - np.exp(eta) * a - gammaln(c + 1.0)))


def check_response(family: str, y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)):
        raise DomainError(f"{family} response has non-finite values")
    if family == "gamma" and np.any(y <= 0):
        raise DomainError("gamma response must be strictly positive")
    if family in ("poisson", "lgcp_lattice"):
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise DomainError(f"{family} response must be non-negative integer counts")
    if family == "bernoulli" and np.any((y != 0) & (y != 1)):
        raise DomainError("bernoulli response must be 0 or 1")


def loglik_terms(family: str, y: np.ndarray, eta: np.ndarray, prec: float = 1.0):
    """Per-observation log-likelihood, gradient and second derivative in ``eta``.

    ``eta`` already includes any offset.  For ``gamma`` the parameterisation is
    mean ``exp(eta)`` with shape ``prec`` (variance mean^2 / prec).
    """
    if family == "gaussian":
        r = y - eta
        ll = 0.5 * np.log(prec) - 0.5 * np.log(2 * np.pi) - 0.5 * prec * r * r
        return ll, prec * r, np.full_like(eta, -prec)
    if family in ("poisson", "lgcp_lattice"):
        mu = np.exp(eta)
        ll = y * eta - mu - gammaln(y + 1.0)
        return ll, y - mu, -mu
    if family == "gamma":
        z = y * np.exp(-eta)
        ll = (prec * np.log(prec) - prec * eta + (prec - 1.0) * np.log(y)
              - prec * z - gammaln(prec))
        return ll, prec * (z - 1.0), -prec * z
    if family == "bernoulli":
        p = expit(eta)
        # log(1 + e^eta) computed stably
        soft = np.where(eta > 0, eta + log1p(np.exp(-eta)), log1p(np.exp(eta)))
        ll = y * eta - soft
        return ll, y - p, -p * (1.0 - p)
    raise ValueError(f"unknown family {family!r}")
