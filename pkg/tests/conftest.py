import numpy as np
import pandas as pd
import pytest
import yaml

from seqconsensus.model import parse_model_config

_ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    _ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def ar1_covariance(n: int, rho: float) -> np.ndarray:
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def linear_gaussian_case(rng, n_obs=300, dim=100, rho=0.6, tau=2.0, obs_prec=4.0):
    """Single AR1 effect observed with Gaussian noise, all hyperparameters fixed.

    Returns the spec, the data table and the dense conjugate posterior
    (mean, precision) computed from the Toeplitz covariance.
    """
    doc = {
        "effects": {"u": {"kind": "ar1", "size": dim, "hyper_names": {"prec": "u_prec", "rho": "u_rho"}}},
        "hyper_priors": {"u_prec": {"dist": "fixed", "value": tau},
                         "u_rho": {"dist": "fixed", "value": rho},
                         "obs_prec": {"dist": "fixed", "value": obs_prec}},
        "blocks": [{"name": "obs", "family": "gaussian", "response": "y", "hyper": {"prec": "obs_prec"},
                    "predictor": [{"effect": "u", "index": ["node"]}]}],
    }
    spec = parse_model_config(yaml.safe_dump(doc))
    node = rng.integers(0, dim, n_obs)
    truth = rng.multivariate_normal(np.zeros(dim), ar1_covariance(dim, rho) / tau)
    y = truth[node] + rng.normal(0, 1 / np.sqrt(obs_prec), n_obs)
    data = pd.DataFrame({"node": node, "y": y})
    A = np.zeros((n_obs, dim))
    A[np.arange(n_obs), node] = 1.0
    Q = tau * np.linalg.inv(ar1_covariance(dim, rho)) + obs_prec * A.T @ A
    mean = np.linalg.solve(Q, obs_prec * A.T @ y)
    return spec, data, mean, Q


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
