import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bayesil import autodiff as ad
from bayesil import distributions as dist
from bayesil.autodiff import Tensor
from bayesil.errors import DimensionError, DomainError
from bayesil.selftest import mc_kl_chol, random_chol

HALF_LOG_2PIE = 0.5 * math.log(2 * math.pi * math.e)


# ---------------------------------------------------------------- sampling


def test_diag_sample_zero_noise_is_mean():
    q = dist.DiagGaussian.create([1.0, -2.0], [0.3, 0.7])
    assert np.array_equal(dist.sample_reparam_diag(q, np.zeros(2)).data, [1.0, -2.0])


def test_diag_sample_standard_normal_passthrough():
    q = dist.DiagGaussian.create(np.zeros(3), 1.0)
    e = np.array([0.1, -1.2, 2.0])
    assert np.allclose(dist.sample_reparam_diag(q, e).data, e, atol=1e-15)


def test_diag_sample_mean_monte_carlo():
    n = 10**6
    q = dist.DiagGaussian.create(np.full(n, 1.5), 0.3)
    w = dist.sample_reparam_diag(q, np.random.default_rng(0).standard_normal(n)).data
    assert abs(w.mean() - 1.5) < 3 * 0.3 / 1e3


def test_diag_sample_shape_mismatch():
    q = dist.DiagGaussian.create(np.zeros(3), 1.0)
    with pytest.raises(DimensionError):
        dist.sample_reparam_diag(q, np.zeros(4))


def test_chol_sample_identity_factor():
    q = dist.CholGaussian.create([[1.0, 2.0]], np.eye(2)[None])
    e = np.array([[0.5, -0.25]])
    assert np.allclose(dist.sample_reparam_chol(q, e).data, [[1.5, 1.75]])


def test_chol_sample_zero_noise_is_mean():
    q = dist.CholGaussian.create([[1.0, 2.0, 3.0]], random_chol(np.random.default_rng(0), 1, 3))
    assert np.array_equal(dist.sample_reparam_chol(q, np.zeros((1, 3))).data, [[1.0, 2.0, 3.0]])


def test_chol_sample_covariance_monte_carlo():
    n = 10**6
    L = np.array([[1.0, 0.0], [0.5, 1.0]])
    q = dist.CholGaussian.create(np.zeros((n, 2)), np.broadcast_to(L, (n, 2, 2)))
    w = dist.sample_reparam_chol(q, np.random.default_rng(0).standard_normal((n, 2))).data
    target = np.array([[1.0, 0.5], [0.5, 1.25]])
    for i in range(2):
        for j in range(2):
            prod = w[:, i] * w[:, j]
            se = prod.std(ddof=1) / math.sqrt(n)
            assert abs(prod.mean() - target[i, j]) < 3 * se


def test_chol_sample_shape_mismatch():
    q = dist.CholGaussian.create(np.zeros((2, 3)), np.broadcast_to(np.eye(3), (2, 3, 3)))
    with pytest.raises(DimensionError):
        dist.sample_reparam_chol(q, np.zeros((2, 2)))


def test_factor_is_lower_with_positive_diagonal():
    raw = Tensor(np.random.default_rng(0).standard_normal((4, dist.packed_size(3))) * 5)
    L = dist.tril_from_packed(raw).data
    assert np.array_equal(L, np.tril(L))
    assert np.all(np.diagonal(L, axis1=1, axis2=2) > 0)


def test_pack_round_trip():
    L = random_chol(np.random.default_rng(2), 3, 4)
    assert np.allclose(dist.tril_from_packed(Tensor(dist.pack_lower(L))).data, L, rtol=1e-13)


def test_softplus_sigma_round_trip():
    s = np.array([1e-4, 0.05, 1.0, 40.0])
    assert np.allclose(ad.softplus_array(dist.inverse_softplus(s)), s, rtol=1e-12)


# ---------------------------------------------------------------- diagonal KL


def test_kl_diag_identical_is_zero():
    assert dist.kl_diag_diag([0.3, -1], [0.2, 2], [0.3, -1], [0.2, 2]).item() == 0.0


def _kl_quadrature(mq, sq, mp, sp):
    f = lambda x: stats.norm.pdf(x, mq, sq) * (stats.norm.logpdf(x, mq, sq) - stats.norm.logpdf(x, mp, sp))
    return integrate.quad(f, mq - 20 * sq, mq + 20 * sq, epsabs=1e-13)[0]


def test_kl_diag_unit_shift():
    value = dist.kl_diag_diag([0.0], [1.0], [1.0], [1.0]).item()
    assert value == pytest.approx(0.5, abs=1e-15)
    assert value == pytest.approx(_kl_quadrature(0, 1, 1, 1), abs=1e-9)


def test_kl_diag_narrow_vs_unit():
    value = dist.kl_diag_diag([0.0], [0.5], [0.0], [1.0]).item()
    assert value == pytest.approx(math.log(2) + 0.125 - 0.5, abs=1e-15)
    assert value == pytest.approx(0.318147, abs=1e-6)
    assert value == pytest.approx(_kl_quadrature(0, 0.5, 0, 1), abs=1e-9)


def test_kl_diag_length_mismatch():
    with pytest.raises(DimensionError):
        dist.kl_diag_diag([0.0, 1.0], [1.0, 1.0], [0.0], [1.0])


finite = st.floats(-3, 3)
positive = st.floats(0.05, 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, positive, finite, positive), min_size=1, max_size=6))
def test_kl_diag_nonnegative_and_zero_only_at_equality(rows):
    mq, sq, mp, sp = (np.array(c) for c in zip(*rows))
    value = dist.kl_diag_diag(mq, sq, mp, sp).item()
    assert value >= 0
    if value == 0:
        assert np.allclose(mq, mp) and np.allclose(sq, sp)


# ---------------------------------------------------------------- Cholesky KL


def test_kl_chol_identical_is_exactly_zero():
    rng = np.random.default_rng(0)
    L, m = random_chol(rng, 3, 4), rng.standard_normal((3, 4))
    assert dist.kl_chol_chol(m, L, m, L).item() == 0.0


def test_kl_chol_one_dimensional_reduces_to_diag():
    mq, sq, mp, sp = 0.3, 0.7, -0.4, 1.3
    chol = dist.kl_chol_chol([[mq]], [[[sq]]], [[mp]], [[[sp]]]).item()
    assert chol == pytest.approx(dist.kl_diag_diag([mq], [sq], [mp], [sp]).item(), rel=1e-14)


def test_kl_chol_matches_dense_formula():
    rng = np.random.default_rng(4)
    Lq, Lp = random_chol(rng, 1, 3)[0], random_chol(rng, 1, 3)[0]
    mq, mp = rng.standard_normal(3), rng.standard_normal(3)
    Sq, Sp = Lq @ Lq.T, Lp @ Lp.T
    Spi = np.linalg.inv(Sp)
    d = mp - mq
    expected = 0.5 * (np.trace(Spi @ Sq) + d @ Spi @ d - 3 + np.linalg.slogdet(Sp)[1] - np.linalg.slogdet(Sq)[1])
    assert dist.kl_chol_chol(mq[None], Lq[None], mp[None], Lp[None]).item() == pytest.approx(expected, rel=1e-12)


def test_kl_chol_monte_carlo():
    rng = np.random.default_rng(5)
    Lq, Lp = random_chol(rng, 1, 3), random_chol(rng, 1, 3)
    mq, mp = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    exact = dist.kl_chol_chol(mq, Lq, mp, Lp).item()
    est, se = mc_kl_chol(mq[0], Lq[0], mp[0], Lp[0], 10**6, rng)
    assert abs(exact - est) < 3 * se


def test_kl_chol_dimension_mismatch():
    with pytest.raises(DimensionError):
        dist.kl_chol_chol(np.zeros((1, 2)), np.eye(2)[None], np.zeros((1, 3)), np.eye(3)[None])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 5))
def test_kl_chol_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    L1, L2 = random_chol(rng, 2, d), random_chol(rng, 2, d)
    m1, m2 = rng.standard_normal((2, d)), rng.standard_normal((2, d))
    assert dist.kl_chol_chol(m1, L1, m2, L2).item() >= -1e-12


def test_kl_chol_gradients_through_packed_factor():
    rng = np.random.default_rng(6)
    q = dist.CholGaussian.create(rng.standard_normal((2, 3)), random_chol(rng, 2, 3))
    Lp, mp = random_chol(rng, 2, 3), rng.standard_normal((2, 3))
    assert ad.grad_check(lambda: dist.kl_chol_chol(q.mu, q.factor(), mp, Lp), q.parameters()) < 1e-4


def test_kl_diag_gradients_through_rho():
    rng = np.random.default_rng(7)
    q = dist.DiagGaussian.create(rng.standard_normal(4), 0.2 + rng.random(4))
    p = dist.DiagGaussian.create(rng.standard_normal(4), 0.2 + rng.random(4), requires_grad=False)
    assert ad.grad_check(lambda: dist.kl_gaussians(q, p), q.parameters()) < 1e-4


# ---------------------------------------------------------------- entropy and cross-entropy


def test_entropy_unit_sigma():
    assert dist.entropy_diag([1.0]).item() == pytest.approx(1.418939, abs=1e-6)
    assert dist.entropy_diag([1.0]).item() == pytest.approx(HALF_LOG_2PIE, abs=1e-15)


def test_entropy_doubling_adds_log_two():
    s = np.array([0.3, 1.7])
    gap = dist.entropy_diag(2 * s).item() - dist.entropy_diag(s).item()
    assert gap == pytest.approx(2 * math.log(2), abs=1e-14)


def test_entropy_two_elements():
    value = dist.entropy_diag([0.5, 2.0]).item()
    assert value == pytest.approx(2 * HALF_LOG_2PIE + math.log(0.5) + math.log(2), abs=1e-14)
    assert value == pytest.approx(2.837877, abs=1e-6)


def test_entropy_nonpositive_sigma():
    with pytest.raises(DomainError):
        dist.entropy_diag([1.0, 0.0])


def test_cross_entropy_self_equals_entropy():
    rng = np.random.default_rng(0)
    mu, sigma = rng.standard_normal((3, 4)), 0.1 + rng.random((3, 4))
    for z in (0.0, 0.7, -3.0, rng.standard_normal(3)):
        ce = dist.cross_entropy_scaled(mu, sigma, mu, sigma, z).item()
        assert ce - dist.entropy_diag(sigma).item() == 0.0


def test_cross_entropy_zero_scale_drops_mean_gap():
    value = dist.cross_entropy_scaled([1.0], [0.5], [-2.0], [1.5], 0.0).item()
    assert value == pytest.approx(0.5 * math.log(2 * math.pi * 1.5**2) + 0.25 / (2 * 1.5**2), abs=1e-14)


def test_cross_entropy_worked_value():
    value = dist.cross_entropy_scaled([1.0], [0.5], [0.0], [1.0], 2.0).item()
    assert value == pytest.approx(0.5 * math.log(2 * math.pi) + (0.25 + 4) / 2, abs=1e-14)
    assert value == pytest.approx(3.043939, abs=1e-6)
    w = 2.0 * 1.0 + 0.5 * np.random.default_rng(0).standard_normal(10**6)
    samples = -stats.norm.logpdf(w, 0.0, 1.0)
    assert abs(samples.mean() - value) < 3 * samples.std(ddof=1) / 1e3


def test_cross_entropy_nonpositive_target_sigma():
    with pytest.raises(DomainError):
        dist.cross_entropy_scaled([1.0], [0.5], [0.0], [0.0], 1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), z=st.floats(-5, 5))
def test_self_cross_entropy_cancels_entropy_exactly(seed, z):
    rng = np.random.default_rng(seed)
    mu, sigma = rng.standard_normal((2, 3)) * 3, 0.01 + rng.random((2, 3)) * 4
    assert dist.cross_entropy_scaled(mu, sigma, mu, sigma, z).item() - dist.entropy_diag(sigma).item() == 0.0
