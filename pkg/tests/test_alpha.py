import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqconsensus.alpha import (AlphaError, alpha_nodes, pool_alpha, ratio_gaussian_approx,
                                rescale_effect)
from seqconsensus.consensus import combine_multivariate
from seqconsensus.gmrf import GaussianDensity
from seqconsensus.infer import GaussianMarginal as G


def _mc_ratio(num, den, rho=0.0, n=1_000_000, seed=0):
    z = np.random.default_rng(seed).standard_normal((2, n))
    d = den.mean + den.sd * z[0]
    x = num.mean + num.sd * (rho * z[0] + np.sqrt(1 - rho * rho) * z[1])
    r = x / d
    return r.mean(), r.var()


def test_ratio_plug_in_values():
    sq = ratio_gaussian_approx(G(2.0, 100.0), G(1.0, 100.0), variance="squared-precision")
    assert sq.mean == pytest.approx(2.02, abs=1e-14)
    assert sq.variance == pytest.approx(0.0104, rel=1e-12)
    delta = ratio_gaussian_approx(G(2.0, 100.0), G(1.0, 100.0))
    assert delta.variance == pytest.approx(0.05, rel=1e-12)


def test_ratio_against_monte_carlo():
    mean, var = _mc_ratio(G(2.0, 100.0), G(1.0, 100.0))
    delta = ratio_gaussian_approx(G(2.0, 100.0), G(1.0, 100.0))
    sq = ratio_gaussian_approx(G(2.0, 100.0), G(1.0, 100.0), variance="squared-precision")
    assert delta.mean == pytest.approx(mean, rel=0.02)
    assert abs(delta.variance - var) < abs(sq.variance - var)


def test_zero_numerator():
    out = ratio_gaussian_approx(G(0.0, 100.0), G(1.0, 100.0))
    assert out.mean == 0.0
    assert out.variance == pytest.approx(0.01, rel=1e-12)


def test_denominator_near_zero_rejected():
    with pytest.raises(AlphaError, match="too close to zero"):
        ratio_gaussian_approx(G(1.0, 1.0), G(0.1, 1.0))


def test_correlation_can_make_variance_degenerate():
    with pytest.raises(AlphaError, match="not positive"):
        ratio_gaussian_approx(G(3.0, 1.0), G(3.0, 1.0), rho=1.0)
    with pytest.raises(AlphaError, match="outside"):
        ratio_gaussian_approx(G(1.0, 1.0), G(3.0, 1.0), rho=1.5)


def test_proportional_nodes():
    rng = np.random.default_rng(0)
    mu = rng.uniform(1, 3, 40) * rng.choice([-1, 1], 40)
    nodes = [(G(0.7 * m, 1e6), G(m, 1e6), 0.0) for m in mu]
    est = pool_alpha(nodes)
    assert est.point == pytest.approx(0.7, abs=1e-12)
    assert est.gaussian.mean == pytest.approx(0.7, abs=1e-3)
    assert est.node_count == 40 and est.dropped == 0


def test_near_zero_denominators_are_filtered():
    good = [(G(0.7 * m, 100.0), G(m, 100.0), 0.0) for m in (1.0, 2.0, -1.5, 3.0)]
    bad = [(G(0.01, 100.0), G(s * 0.05, 100.0), 0.0) for s in (1, -1, 1)]
    est = pool_alpha(good + bad)
    assert est.node_count == 4 and est.dropped == 3


def test_too_few_nodes():
    with pytest.raises(AlphaError, match="need at least 3"):
        pool_alpha([(G(1.0, 100.0), G(1.0, 100.0), 0.0)] * 2)


def test_rescale_examples():
    d = GaussianDensity(np.full(3, 4.0), np.eye(3))
    same = rescale_effect(d, 1.0)
    np.testing.assert_array_equal(same.mean, d.mean)
    np.testing.assert_array_equal(same.dense_precision(), d.dense_precision())
    half = rescale_effect(d, 2.0)
    np.testing.assert_array_equal(half.mean, np.full(3, 2.0))
    np.testing.assert_array_equal(half.dense_precision(), 4 * np.eye(3))
    with pytest.raises(AlphaError):
        rescale_effect(d, 0.0)


def _ar1_precision(n, rho):
    idx = np.arange(n)
    return np.linalg.inv(rho ** np.abs(idx[:, None] - idx[None, :]))


def test_rescaled_proportional_copies_pool_like_unscaled():
    rng = np.random.default_rng(1)
    R = _ar1_precision(15, 0.5)
    alpha = 0.7
    base = [GaussianDensity(rng.normal(size=15), (j + 1) * R) for j in range(3)]
    scaled = [GaussianDensity(alpha * d.mean, d.dense_precision() / alpha ** 2) for d in base]
    a = combine_multivariate(base)
    b = combine_multivariate([rescale_effect(d, alpha) for d in scaled])
    np.testing.assert_allclose(b.mean, a.mean, atol=1e-10)
    np.testing.assert_allclose(b.dense_precision(), a.dense_precision(), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 20), st.floats(0.1, 10), st.floats(-0.9, 0.9), st.integers(0, 2 ** 32 - 1))
def test_scale_and_precision_are_confounded(alpha, tau, rho, seed):
    R = _ar1_precision(6, rho)
    mean = np.random.default_rng(seed).normal(size=6)
    copy = GaussianDensity(alpha * mean, (tau / alpha ** 2) * R)
    back = rescale_effect(copy, alpha)
    np.testing.assert_allclose(back.mean, mean, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(back.dense_precision(), tau * R, rtol=1e-14, atol=1e-14 * tau * np.abs(R).max())


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3),
       st.lists(st.floats(0.5, 10) | st.floats(-10, -0.5), min_size=3, max_size=30))
def test_median_recovers_exact_proportionality(alpha, mu):
    nodes = [(G(alpha * m, 1e4), G(m, 1e4), 0.0) for m in mu]
    assert pool_alpha(nodes).point == pytest.approx(alpha, rel=1e-12)


def test_alpha_nodes_use_exact_marginals():
    Q = np.array([[2.0, -1.0], [-1.0, 2.0]])
    nodes = alpha_nodes(GaussianDensity(np.array([1.0, 2.0]), Q), GaussianDensity(np.array([3.0, 4.0]), Q))
    assert nodes[0][0].precision == pytest.approx(1.5)
    assert nodes[1][1].mean == 4.0
    with pytest.raises(AlphaError, match="nodes"):
        alpha_nodes(GaussianDensity(np.zeros(2), np.eye(2)), GaussianDensity(np.zeros(3), np.eye(3)))
