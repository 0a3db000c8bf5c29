import numpy as np
import pytest
import scipy.sparse as sp
from conftest import ar1_covariance
from hypothesis import given, settings
from hypothesis import strategies as st

from seqconsensus.gmrf import (EffectSpec, FactorizationError, GaussianDensity, build_effect_precision,
                               factorize, marginal_variances, read_triplets, sample_gmrf,
                               write_triplets)


def _spd(rng, n, density=1.0):
    M = rng.normal(size=(n, n)) * (rng.random((n, n)) < density)
    return M @ M.T + n * np.eye(n)


# --------------------------------------------------------------------------- builders


def test_iid_precision():
    P = build_effect_precision(EffectSpec("iid", 3, hyper_names={"prec": "t"}), {"t": 2.0})
    np.testing.assert_array_equal(P.toarray(), 2 * np.eye(3))


def test_ar1_zero_correlation_is_identity():
    spec = EffectSpec("ar1", 3, hyper_names={"prec": "t", "rho": "r"})
    np.testing.assert_allclose(build_effect_precision(spec, {"t": 1.0, "r": 0.0}).toarray(), np.eye(3))


def test_rw2_matches_second_difference_gram():
    D = np.zeros((3, 5))
    for i in range(3):
        D[i, i:i + 3] = (1, -2, 1)
    P = build_effect_precision(EffectSpec("rw2", 5, hyper_names={"prec": "t"}), {"t": 1.0})
    np.testing.assert_array_equal(P.toarray(), D.T @ D)
    assert P.rank_deficiency == 2


@pytest.mark.parametrize("spec, theta, message", [
    (EffectSpec("ar1", 4, hyper_names={"rho": "r"}), {"r": 1.0}, "correlation"),
    (EffectSpec("iid", 4, hyper_names={"prec": "t"}), {"t": -1.0}, "positive"),
    (EffectSpec("lattice_matern", grid=(1, 4), hyper_names={"range": "a", "sd": "s"}),
     {"a": 1.0, "s": 1.0}, "grid"),
    (EffectSpec("rw1", 1, hyper_names={"prec": "t"}), {"t": 1.0}, "size"),
])
def test_builder_errors(spec, theta, message):
    with pytest.raises(ValueError, match=message):
        build_effect_precision(spec, theta)


def test_unknown_kind_and_bad_kronecker():
    with pytest.raises(ValueError, match="unknown effect kind"):
        EffectSpec("spline", 3)
    with pytest.raises(ValueError, match="two child"):
        EffectSpec("kronecker", children=(EffectSpec("iid", 2),))


def test_missing_theta_name():
    with pytest.raises(KeyError, match="u_prec"):
        build_effect_precision(EffectSpec("iid", 2, hyper_names={"prec": "u_prec"}), {})


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.floats(0.1, 10))
def test_random_walk_null_spaces(n, tau):
    q1 = build_effect_precision(EffectSpec("rw1", n, hyper_names={"prec": "t"}), {"t": tau}).toarray()
    q2 = build_effect_precision(EffectSpec("rw2", n, hyper_names={"prec": "t"}), {"t": tau}).toarray()
    ones, ramp = np.ones(n), np.arange(1, n + 1, dtype=float)
    assert np.max(np.abs(q1 @ ones)) < 1e-10
    assert np.max(np.abs(q2 @ ones)) < 1e-10
    assert np.max(np.abs(q2 @ ramp)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.floats(-0.95, 0.95))
def test_ar1_has_unit_marginal_variance(n, rho):
    spec = EffectSpec("ar1", n, hyper_names={"rho": "r"})
    Q = build_effect_precision(spec, {"r": rho}).toarray()
    np.testing.assert_allclose(np.diag(np.linalg.inv(Q)), 1.0, atol=1e-8)
    np.testing.assert_allclose(np.linalg.inv(Q), ar1_covariance(n, rho), atol=1e-8)


def test_kronecker_matches_dense_oracle():
    rng = np.random.default_rng(0)
    a = EffectSpec("ar1", 3, hyper_names={"rho": "r", "prec": "t"})
    b = EffectSpec("rw1", 4, hyper_names={"prec": "s"})
    spec = EffectSpec("kronecker", children=(a, b))
    theta = {"r": 0.4, "t": 2.0, "s": 3.0}
    P = build_effect_precision(spec, theta)
    Qa = build_effect_precision(a, theta).toarray()
    Qb = build_effect_precision(b, theta).toarray()
    assert P.dim == 12
    np.testing.assert_allclose(P.toarray(), np.kron(Qa, Qb), atol=1e-14)
    X = rng.normal(size=(3, 4))
    np.testing.assert_allclose(P.toarray() @ X.ravel(), (Qa @ X @ Qb.T).ravel(), atol=1e-12)
    assert P.constraints.shape == (3, 12)


def test_lattice_matern_is_spd_with_unit_average_variance():
    spec = EffectSpec("lattice_matern", grid=(6, 5), hyper_names={"range": "a", "sd": "s"})
    P = build_effect_precision(spec, {"a": 3.0, "s": 2.0})
    Q = P.toarray()
    np.testing.assert_allclose(Q, Q.T, atol=1e-12)
    var = np.diag(np.linalg.inv(Q))
    assert np.all(var > 0)
    assert np.mean(var) == pytest.approx(4.0, rel=1e-8)


# --------------------------------------------------------------------------- factorization


def test_logdet_examples():
    assert factorize(sp.identity(4, format="csr")).logdet() == pytest.approx(0.0, abs=1e-15)
    assert factorize(sp.diags([2.0, 2.0]).tocsr()).logdet() == pytest.approx(2 * np.log(2), rel=1e-14)


@pytest.mark.parametrize("density", [1.0, 0.1])
def test_logdet_matches_dense_oracle(density):
    rng = np.random.default_rng(5)
    Q = _spd(rng, 50, density)
    sign, oracle = np.linalg.slogdet(Q)
    assert sign > 0
    for M in (sp.csr_matrix(Q), Q):
        assert factorize(M).logdet() == pytest.approx(oracle, rel=1e-8)


def test_not_positive_definite_reports_pivot():
    Q = sp.csr_matrix(np.diag([1.0, 2.0, -1.0, 4.0]))
    with pytest.raises(FactorizationError) as info:
        factorize(Q)
    assert info.value.pivot == 2


def test_marginal_variance_examples():
    np.testing.assert_allclose(marginal_variances(sp.diags([4.0, 5.0]).tocsr()), [0.25, 0.2])
    np.testing.assert_allclose(marginal_variances(sp.csr_matrix([[2.0, -1.0], [-1.0, 2.0]])), [2 / 3, 2 / 3])
    spec = EffectSpec("ar1", 20, hyper_names={"rho": "r"})
    P = build_effect_precision(spec, {"r": 0.5})
    np.testing.assert_allclose(marginal_variances(P), np.diag(np.linalg.inv(P.toarray())), atol=1e-8)


def test_selected_inversion_on_random_sparse():
    rng = np.random.default_rng(6)
    Q = _spd(rng, 120, 0.03)
    oracle = np.diag(np.linalg.inv(Q))
    np.testing.assert_allclose(marginal_variances(sp.csr_matrix(Q)), oracle, rtol=1e-8)


def test_constrained_variances_match_projection_oracle():
    spec = EffectSpec("rw1", 8, hyper_names={"prec": "t"})
    P = build_effect_precision(spec, {"t": 1.0})
    Q = P.regularized().toarray()
    S = np.linalg.inv(Q)
    A = np.ones((1, 8))
    cond = S - S @ A.T @ np.linalg.solve(A @ S @ A.T, A @ S)
    np.testing.assert_allclose(marginal_variances(P), np.diag(cond), rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2 ** 32 - 1))
def test_solve_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    Q = sp.csr_matrix(_spd(rng, n, 0.2))
    v = rng.normal(size=n)
    np.testing.assert_allclose(factorize(Q).solve(Q @ v), v, atol=1e-8)


# --------------------------------------------------------------------------- sampling


def test_sampling_is_deterministic():
    d = GaussianDensity(np.zeros(3), sp.identity(3, format="csr"))
    np.testing.assert_array_equal(sample_gmrf(d, 7), sample_gmrf(d, 7))


def test_near_degenerate_sample():
    d = GaussianDensity(np.ones(2), sp.diags([1e6, 1e6]).tocsr())
    assert np.all(np.abs(sample_gmrf(d, 1) - 1) < 0.01)


def test_sample_covariance_matches_inverse():
    spec = EffectSpec("ar1", 4, hyper_names={"rho": "r"})
    P = build_effect_precision(spec, {"r": 0.8})
    draws = sample_gmrf(GaussianDensity(np.zeros(4), P), 11, size=10_000)
    cov = np.cov(draws.T)
    oracle = np.linalg.inv(P.toarray())
    np.testing.assert_allclose(cov, oracle, rtol=0.05)


def test_constrained_samples_satisfy_constraints():
    spec = EffectSpec("rw2", 12, hyper_names={"prec": "t"})
    P = build_effect_precision(spec, {"t": 1.0})
    draws = sample_gmrf(GaussianDensity(np.zeros(12), P), 3, size=50)
    np.testing.assert_allclose(draws @ P.constraints.T, 0.0, atol=1e-8)


def test_triplet_round_trip(tmp_path):
    spec = EffectSpec("ar1", 6, hyper_names={"rho": "r"})
    P = build_effect_precision(spec, {"r": 0.3})
    path = tmp_path / "q.txt"
    write_triplets(P, path)
    first = path.read_text().splitlines()[0].split()
    assert len(first) == 3
    np.testing.assert_array_equal(read_triplets(path, 6).toarray(), P.toarray())
