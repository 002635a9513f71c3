import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blora import tensor as T
from blora.adapter import (
    GaussianMatrix,
    IsotropicPrior,
    LowRankAdapter,
    init_adapter,
    kl_elementwise,
    kl_total,
    mean_delta,
    merge,
    sample_delta,
)
from blora.gradcheck import numeric_gradient, relative_error
from blora.tensor import RandomStream, Tensor


def mc_kl(mu, sigma, sigma_p, n=1_000_000, seed=0):
    """E_q[log q - log p] by plain Monte Carlo with numpy's own generator."""
    x = mu + sigma * np.random.default_rng(seed).standard_normal(n)
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma)
    log_p = -0.5 * (x / sigma_p) ** 2 - math.log(sigma_p)
    return float(np.mean(log_q - log_p))


def fixed_adapter(a_mu, b_mu, alpha=1.0, a_ls=None, b_ls=None):
    a_mu, b_mu = np.asarray(a_mu, float), np.asarray(b_mu, float)
    a_ls = np.full(a_mu.shape, -50.0) if a_ls is None else np.asarray(a_ls, float)
    b_ls = np.full(b_mu.shape, -50.0) if b_ls is None else np.asarray(b_ls, float)
    return LowRankAdapter(
        GaussianMatrix(Tensor(a_mu, requires_grad=True), Tensor(a_ls, requires_grad=True)),
        GaussianMatrix(Tensor(b_mu, requires_grad=True), Tensor(b_ls, requires_grad=True)),
        rank=a_mu.shape[1], alpha=alpha)


def test_init_mean_delta_is_zero():
    ad = init_adapter(6, 5, 3, 3.0, RandomStream(0))
    assert np.all(mean_delta(ad).data == 0.0)
    assert np.all(ad.B.mu.data == 0) and np.all(ad.B.log_sigma.data == -50.0)


def test_init_a_ranges():
    ad = init_adapter(64, 64, 32, 32.0, RandomStream(1))
    ls = ad.A.log_sigma.data
    assert ls.min() >= -4.5 and ls.max() < 0.0
    bound = math.sqrt(6 / 64)
    assert np.abs(ad.A.mu.data).max() <= bound


def test_b_sample_has_vanishing_width():
    ad = init_adapter(8, 8, 2, 2.0, RandomStream(2))
    b = ad.B.sample(RandomStream(3)).data
    assert np.max(np.abs(b - ad.B.mu.data)) < 1e-15


@pytest.mark.parametrize("r", [0, 6])
def test_init_rejects_bad_rank(r):
    with pytest.raises(ValueError):
        init_adapter(5, 4, r, 1.0, RandomStream(0))


def test_sample_equals_mean_when_degenerate():
    rng = np.random.default_rng(0)
    ad = fixed_adapter(rng.normal(size=(4, 2)), rng.normal(size=(2, 3)), alpha=2.0)
    np.testing.assert_allclose(sample_delta(ad, RandomStream(9)).data, mean_delta(ad).data,
                               atol=1e-15, rtol=0)


def test_sample_moments_scalar_factors():
    # Delta = A*B with A ~ N(0, 1), B = 1: mean 0, variance 1
    n = 100_000
    ad = fixed_adapter([[0.0]], [[1.0]], a_ls=[[0.0]])
    stream = RandomStream(21)
    with T.no_grad():
        draws = np.array([sample_delta(ad, stream).data[0, 0] for _ in range(n)])
    se_mean = 1 / math.sqrt(n)
    se_var = math.sqrt(2 / n)
    assert abs(draws.mean()) < 3 * se_mean
    assert abs(draws.var() - 1.0) < 3 * se_var


def test_sample_gradient_wrt_log_sigma_with_frozen_noise():
    rng = np.random.default_rng(4)
    ad = fixed_adapter(rng.normal(size=(3, 2)), rng.normal(size=(2, 4)), alpha=1.5,
                       a_ls=rng.uniform(-2, 0, size=(3, 2)), b_ls=rng.uniform(-2, 0, size=(2, 4)))
    loss = T.sum_all(sample_delta(ad, RandomStream(5)))
    grads = T.backward(loss, ad.parameters())
    for t, g in zip(ad.parameters(), grads):
        def f(x, t=t):
            saved = t.data
            t.data = x
            with T.no_grad():
                v = float(sample_delta(ad, RandomStream(5)).data.sum())
            t.data = saved
            return v
        num = numeric_gradient(f, t.data.copy(), 1e-5)
        assert relative_error(g, num) < 1e-5


def test_mean_delta_outer_product():
    ad = fixed_adapter([[1.0], [0.0]], [[0.0, 2.0]])
    np.testing.assert_array_equal(mean_delta(ad).data, [[0.0, 2.0], [0.0, 0.0]])


def test_mean_delta_linear_in_alpha():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
    d1 = mean_delta(fixed_adapter(a, b, alpha=1.0)).data
    d2 = mean_delta(fixed_adapter(a, b, alpha=2.0)).data
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_mean_delta_linear_in_each_factor(ca, cb, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 4))
    base = mean_delta(fixed_adapter(a, b)).data
    np.testing.assert_allclose(mean_delta(fixed_adapter(ca * a, b)).data, ca * base, atol=1e-12)
    np.testing.assert_allclose(mean_delta(fixed_adapter(a, cb * b)).data, cb * base, atol=1e-12)


def test_kl_zero_at_prior():
    prior = IsotropicPrior(0.0, 0.01)
    kl = kl_elementwise(Tensor([0.0]), Tensor([math.log(0.01)]), prior).data
    assert abs(kl[0]) < 1e-14


def test_kl_reference_values():
    prior = IsotropicPrior(0.0, 0.01)
    kl = kl_elementwise(Tensor([0.01, 0.0]), Tensor([math.log(0.01), math.log(0.02)]), prior).data
    assert kl[0] == pytest.approx(0.5, abs=1e-12)
    assert kl[1] == pytest.approx(0.5 * (4 - 1 + 2 * math.log(0.5)), abs=1e-12)
    assert kl[1] == pytest.approx(0.8069, abs=1e-4)
    assert mc_kl(0.01, 0.01, 0.01) == pytest.approx(kl[0], rel=1e-2)
    assert mc_kl(0.0, 0.02, 0.01) == pytest.approx(kl[1], rel=1e-2)


def test_kl_nonzero_prior_mean():
    prior = IsotropicPrior(0.3, 0.5)
    kl = kl_elementwise(Tensor([0.3, 0.8]), Tensor([math.log(0.5)] * 2), prior).data
    assert abs(kl[0]) < 1e-14
    assert kl[1] == pytest.approx(0.5 * 0.25 / 0.25, abs=1e-12)


def test_kl_grid_zero_only_at_prior():
    prior = IsotropicPrior(0.0, 0.01)
    mus = np.linspace(-0.03, 0.03, 13)
    sigmas = np.geomspace(0.0025, 0.04, 9)
    M, S = np.meshgrid(mus, sigmas)
    kl = kl_elementwise(Tensor(M), Tensor(np.log(S)), prior).data
    at_prior = (np.abs(M) < 1e-15) & (np.abs(S - 0.01) < 1e-15)
    assert at_prior.sum() == 1
    assert np.all(np.abs(kl[at_prior]) < 1e-13)
    assert np.all(kl[~at_prior] > 0)


def test_kl_total_zero_at_prior():
    s = math.log(0.01)
    ad = fixed_adapter(np.zeros((3, 2)), np.zeros((2, 3)), a_ls=np.full((3, 2), s),
                       b_ls=np.full((2, 3), s))
    assert abs(kl_total([ad], IsotropicPrior()).item()) < 1e-13


def test_kl_total_hand_value():
    s = math.log(0.01)
    ad = fixed_adapter([[0.01]], [[0.01]], a_ls=[[s]], b_ls=[[s]])
    assert kl_total([ad], IsotropicPrior()).item() == pytest.approx(0.5, abs=1e-12)


def test_kl_total_normalization_is_global():
    rng = np.random.default_rng(3)
    prior = IsotropicPrior()
    mu = rng.normal(scale=0.02, size=(4, 2))
    ls = rng.uniform(-6, -3, size=(4, 2))
    mu_b = rng.normal(scale=0.02, size=(2, 4))
    ls_b = rng.uniform(-6, -3, size=(2, 4))
    whole = fixed_adapter(mu, mu_b, a_ls=ls, b_ls=ls_b)
    # the same 16 elements split across two 2x1 / 1x4 adapters
    halves = [
        fixed_adapter(mu[:2, :1], mu_b[:1], a_ls=ls[:2, :1], b_ls=ls_b[:1]),
        fixed_adapter(np.concatenate([mu[2:, :1], mu[:, 1:]]), mu_b[1:],
                      a_ls=np.concatenate([ls[2:, :1], ls[:, 1:]]), b_ls=ls_b[1:]),
    ]
    assert kl_total(halves, prior).item() == pytest.approx(kl_total([whole], prior).item(), abs=1e-12)


def test_kl_total_rejects_empty():
    with pytest.raises(ValueError):
        kl_total([], IsotropicPrior())


def test_kl_total_gradients():
    rng = np.random.default_rng(8)
    ad = fixed_adapter(rng.normal(scale=0.05, size=(3, 2)), rng.normal(scale=0.05, size=(2, 4)),
                       a_ls=rng.uniform(-5, -3, size=(3, 2)), b_ls=rng.uniform(-5, -3, size=(2, 4)))
    prior = IsotropicPrior()
    grads = T.backward(kl_total([ad], prior), ad.parameters())
    for t, g in zip(ad.parameters(), grads):
        def f(x, t=t):
            saved = t.data
            t.data = x
            with T.no_grad():
                v = kl_total([ad], prior).item()
            t.data = saved
            return v
        assert relative_error(g, numeric_gradient(f, t.data.copy(), 1e-5)) < 1e-6


def test_kl_matches_monte_carlo_on_random_triples():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 20:
        sigma_p = rng.uniform(0.005, 0.5)
        mu = rng.uniform(-2, 2) * sigma_p
        sigma = sigma_p * rng.uniform(0.5, 2.0)
        closed = kl_elementwise(Tensor([mu]), Tensor([math.log(sigma)]), IsotropicPrior(0, sigma_p)).item()
        if closed < 0.2:
            continue
        assert mc_kl(mu, sigma, sigma_p, seed=checked) == pytest.approx(closed, rel=1e-2)
        checked += 1


def test_merge_fresh_adapter_is_identity():
    W0 = Tensor(np.random.default_rng(0).normal(size=(5, 5)))
    ad = init_adapter(5, 5, 2, 2.0, RandomStream(1))
    np.testing.assert_array_equal(merge(W0, ad, "mean").data, W0.data)


def test_merge_sampled_degenerate_equals_mean():
    rng = np.random.default_rng(2)
    W0 = Tensor(rng.normal(size=(3, 4)))
    ad = fixed_adapter(rng.normal(size=(3, 2)), rng.normal(size=(2, 4)))
    np.testing.assert_allclose(merge(W0, ad, "sampled", RandomStream(0)).data,
                               merge(W0, ad, "mean").data, atol=1e-15, rtol=0)


def test_merge_adds_and_does_not_mutate():
    W0 = Tensor(np.eye(2))
    before = W0.data.copy()
    out = merge(W0, fixed_adapter([[1.0], [0.0]], [[0.0, 2.0]]), "mean")
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_array_equal(W0.data, before)


def test_merge_shape_mismatch():
    with pytest.raises(T.ShapeError):
        merge(Tensor(np.eye(3)), fixed_adapter([[1.0], [0.0]], [[0.0, 2.0]]))


def test_sample_mean_converges_like_inverse_sqrt_n():
    rng = np.random.default_rng(5)
    ad = fixed_adapter(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
                       a_ls=np.full((2, 2), math.log(0.5)), b_ls=np.full((2, 2), math.log(0.5)))
    target = mean_delta(ad).data
    stream = RandomStream(17)
    errors = {}
    with T.no_grad():
        draws = np.array([sample_delta(ad, stream).data for _ in range(100_000)])
    sd = draws.std(axis=0).max()
    for n in (1_000, 10_000, 100_000):
        err = np.abs(draws[:n].mean(axis=0) - target).max()
        errors[n] = err
        # max over 4 entries of |N(0, sd^2/n)|: 4.5 sigma is a generous envelope
        assert err < 4.5 * sd / math.sqrt(n)
    assert errors[100_000] < errors[1_000]


def test_gaussian_matrix_shape_check():
    with pytest.raises(T.ShapeError):
        GaussianMatrix(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_prior_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        IsotropicPrior(0.0, 0.0)
