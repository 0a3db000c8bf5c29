import json

import numpy as np
import pandas as pd
import pytest
import yaml
from conftest import linear_gaussian_case
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from seqconsensus.infer import GaussianMarginal as G
from seqconsensus.infer import fit_block
from seqconsensus.model import PartitionPlan, parse_model_config
from seqconsensus.sequential import (SequentialError, SequentialOptions, run_sc, run_scp,
                                     second_pass_prior, update_fixed_prior)


def _intercept_spec(prior_prec=1.0, obs_prec=1.0, family="gaussian"):
    doc = {"fixed": [{"name": "b0", "mean": 0.0, "precision": prior_prec}],
           "hyper_priors": {"p": {"dist": "fixed", "value": obs_prec}},
           "blocks": [{"name": "obs", "family": family, "response": "y", "predictor": [{"intercept": "b0"}]}]}
    if family == "gaussian":
        doc["blocks"][0]["hyper"] = {"prec": "p"}
    else:
        doc["hyper_priors"] = {}
    return parse_model_config(yaml.safe_dump(doc))


def _time_block_spec(T=12, K=3, groups=3):
    """Intercept plus an effect that is independent across time slices given the intercept."""
    size = T // groups
    doc = {
        "effects": {"st": {"kind": "kronecker", "children": [
            {"kind": "ar1", "size": T, "hyper_names": {"rho": "r", "prec": "t"}},
            {"kind": "iid", "size": K, "hyper_names": {"prec": "k"}}]}},
        "fixed": [{"name": "b0", "mean": 0.0, "precision": 0.5}],
        "hyper_priors": {"p": {"dist": "fixed", "value": 3.0}, "r": {"dist": "fixed", "value": 0.0},
                         "t": {"dist": "fixed", "value": 2.0}, "k": {"dist": "fixed", "value": 1.0}},
        "blocks": [{"name": "obs", "family": "gaussian", "response": "y", "hyper": {"prec": "p"},
                    "predictor": [{"intercept": "b0"}, {"effect": "st", "index": ["time", "node"]}]}],
        "partition": {"mode": "by_time_blocks", "time_column": "time",
                      "groups": [list(range(size * g, size * g + size)) for g in range(groups)]},
    }
    rng = np.random.default_rng(0)
    data = pd.DataFrame({"time": rng.integers(0, T, 90), "node": rng.integers(0, K, 90)})
    data["y"] = 1.0 + rng.normal(size=90)
    return parse_model_config(yaml.safe_dump(doc)), data


# --------------------------------------------------------------------------- prior hand-offs


def test_update_fixed_prior_is_identity():
    assert update_fixed_prior(G(1.5, 10.0)) == G(1.5, 10.0)


def test_two_block_conjugate_chain():
    spec = _intercept_spec()
    report = run_sc(spec, pd.DataFrame({"y": [1.0, 3.0]}), PartitionPlan("by_row_blocks", n_groups=2))
    final = report.fixed_marginals["b0"]
    assert final.mean == pytest.approx(4 / 3, abs=1e-12)
    assert final.precision == pytest.approx(3.0, rel=1e-12)


def test_identical_blocks_add_precision_each_step():
    spec = _intercept_spec(prior_prec=1.0, obs_prec=2.0)
    data = pd.DataFrame({"y": np.full(5, 0.5)})
    report = run_sc(spec, data, PartitionPlan("by_row_blocks", n_groups=5))
    precs = [h["b0"].precision for h in report.state.fixed_history]
    np.testing.assert_allclose(precs, 1.0 + 2.0 * np.arange(1, 6), rtol=1e-12)


def test_second_pass_prior_examples():
    out = second_pass_prior(G(0.0, 1.0), G(2.0, 5.0), G(1.0, 3.0))
    assert out.precision == 3.0 and out.mean == pytest.approx(7 / 3, abs=1e-15)
    prev = G(0.4, 2.0)
    last = G(1.2, 7.0)
    assert second_pass_prior(prev, last, last) == prev
    same = G(-0.3, 4.0)
    assert second_pass_prior(same, same, same) == same
    with pytest.raises(ValueError, match="not positive"):
        second_pass_prior(G(0.0, 1.0), G(0.0, 2.0), G(0.0, 3.0))


def test_second_pass_prior_matches_density_ratio():
    prev, final, cur = G(0.0, 1.0), G(2.0, 5.0), G(1.0, 3.0)
    x = np.linspace(-3, 6, 7)

    def logpdf(m):
        return norm.logpdf(x, m.mean, m.sd)

    out = second_pass_prior(prev, final, cur)
    diff = logpdf(prev) + logpdf(final) - logpdf(cur) - logpdf(out)
    np.testing.assert_allclose(diff - diff[0], 0.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_conjugate_chain_matches_one_shot_fit(k, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 40))
    spec = _intercept_spec(prior_prec=float(rng.uniform(0.1, 3)), obs_prec=float(rng.uniform(0.1, 5)))
    data = pd.DataFrame({"y": rng.normal(2.0, 1.5, n)})
    groups = [g.tolist() for g in np.array_split(rng.permutation(n), k)]
    chain = run_sc(spec, data, PartitionPlan("by_row_blocks", groups=groups)).fixed_marginals["b0"]
    full = fit_block(spec, data).fixed_marginals["b0"]
    assert chain.mean == pytest.approx(full.mean, rel=1e-10, abs=1e-10)
    assert chain.precision == pytest.approx(full.precision, rel=1e-10)


# --------------------------------------------------------------------------- algorithms


def test_single_partition_matches_full_fit(rng):
    spec, data, _, _ = linear_gaussian_case(rng, n_obs=80, dim=20)
    plan = PartitionPlan("by_row_blocks", n_groups=1)
    full = fit_block(spec, data).effect_densities["u"]
    sc = run_sc(spec, data, plan)
    scp = run_scp(spec, data, plan, sc_report=sc)
    for report in (sc, scp):
        np.testing.assert_allclose(report.effect("u").mean, full.mean, atol=1e-12)
        np.testing.assert_allclose(report.effect("u").sd, np.sqrt(full.variances()), atol=1e-12)


def test_four_row_blocks_with_correction_match_full_posterior(rng):
    spec, data, mean, _ = linear_gaussian_case(rng, n_obs=200, dim=60)
    report = run_sc(spec, data, PartitionPlan("by_row_blocks", n_groups=4),
                    SequentialOptions(correct_prior=True))
    np.testing.assert_allclose(report.effect("u").mean, mean, atol=1e-8)
    assert report.effect("u").sources == [1, 2, 3, 4]


def test_uncorrected_marginal_pooling_runs(rng):
    spec, data, mean, _ = linear_gaussian_case(rng, n_obs=200, dim=30)
    report = run_sc(spec, data, PartitionPlan("by_row_blocks", n_groups=2), SequentialOptions(pooling="marginal"))
    pooled = report.effect("u")
    assert pooled.primary == "marginal"
    assert np.all(pooled.sd > 0)
    assert np.corrcoef(pooled.mean, mean)[0, 1] > 0.9


def test_second_pass_local_effects_match_full_fit():
    spec, data = _time_block_spec()
    full = fit_block(spec, data).effect_densities["st"]
    full_sd = np.sqrt(full.variances())
    sc = run_sc(spec, data)
    scp = run_scp(spec, data, sc_report=sc)
    assert sorted(scp.local) == ["st", "st#2", "st#3"]
    for key, local in scp.local.items():
        idx = [lbl[1] for lbl in local.node_labels]
        np.testing.assert_allclose(local.mean, full.mean[idx], atol=1e-8)
        np.testing.assert_allclose(local.sd, full_sd[idx], atol=1e-8)
    first = [lbl[1] for lbl in sc.local["st"].node_labels]
    assert np.max(np.abs(sc.local["st"].mean - full.mean[first])) > 1e-3
    np.testing.assert_allclose(sc.local["st#3"].mean, scp.local["st#3"].mean, atol=1e-8)
    np.testing.assert_allclose(sc.local["st#3"].sd, scp.local["st#3"].sd, atol=1e-8)
    assert scp.local["st#2"].step == 2


def test_run_log_records(tmp_path):
    spec, data = _time_block_spec()
    path = tmp_path / "log" / "run.jsonl"
    run_scp(spec, data, options=SequentialOptions(log_path=str(path)))
    records = [json.loads(line) for line in path.read_text().splitlines()]
    steps = [(r["phase"], r["step"]) for r in records if r["event"] == "step"]
    assert steps == [("sc", 1), ("sc", 2), ("sc", 3), ("scp", 1), ("scp", 2), ("scp", 3)]
    assert all("wall_time" in r and "log_marginal_likelihood" in r for r in records if r["event"] == "step")


def test_failing_block_reports_step():
    spec = _intercept_spec(family="poisson")
    data = pd.DataFrame({"y": [1, 2, 0, -3]})
    with pytest.raises(SequentialError) as info:
        run_sc(spec, data, PartitionPlan("by_row_blocks", n_groups=2))
    assert info.value.step == 2 and info.value.phase == "sc"


def test_options_validation():
    with pytest.raises(ValueError, match="pooling"):
        SequentialOptions(pooling="mean")
    with pytest.raises(ValueError, match="alpha_estimator"):
        SequentialOptions(alpha_estimator="mode")
