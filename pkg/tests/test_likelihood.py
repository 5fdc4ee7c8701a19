import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from zimclust import _backend
from zimclust.errors import DimensionError, DomainError
from zimclust.likelihood import (
    MixtureData,
    RegParams,
    ZinbParams,
    ZipParams,
    cluster_log_densities,
    linpred_rate,
    mixture_loglik,
    shared_rate_logdens,
    variant_of,
    zinb_log_pmf,
    zip_log_pmf,
)


def test_zip_pmf_matches_scipy():
    y = np.arange(0, 15)
    lam, phi = 3.3, 0.25
    want = (1 - phi) * stats.poisson.pmf(y, lam)
    want[0] += phi
    np.testing.assert_allclose(np.exp(zip_log_pmf(y, lam, phi)), want, rtol=1e-13)


def test_zinb_pmf_matches_scipy():
    y = np.arange(0, 30)
    mu, alpha, phi = 6.0, 0.4, 0.1
    nu = 1 / alpha
    want = (1 - phi) * stats.nbinom.pmf(y, nu, nu / (nu + mu))
    want[0] += phi
    np.testing.assert_allclose(np.exp(zinb_log_pmf(y, mu, alpha, phi)), want, rtol=1e-12)


def test_zinb_small_alpha_tends_to_zip():
    y = np.arange(0, 20)
    a = zinb_log_pmf(y, 4.0, 1e-9, 0.2)
    b = zip_log_pmf(y, 4.0, 0.2)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_pmf_edge_phi():
    assert zip_log_pmf(0, 2.0, 1.0) == 0.0
    assert zip_log_pmf(3, 2.0, 1.0) == -math.inf
    assert zip_log_pmf(0, 2.0, 0.0) == pytest.approx(-2.0)


@pytest.mark.parametrize(
    "args",
    [(1, -1.0, 0.1), (1, 1.0, 1.2), (-1, 1.0, 0.1), (1.5, 1.0, 0.1)],
)
def test_zip_pmf_domain(args):
    with pytest.raises(DomainError):
        zip_log_pmf(*args)


def test_zinb_pmf_domain():
    with pytest.raises(DomainError):
        zinb_log_pmf(1, 1.0, 0.0, 0.1)


def test_linpred_rate():
    r = linpred_rate(2.0, 0.5, -0.1, [1.0, 2.0], [0.2, -0.05])
    assert r == pytest.approx(2.0 * math.exp(0.5 - 0.1 + 0.2 - 0.1))
    with pytest.raises(OverflowError):
        linpred_rate(1.0, 800.0, 0.0)
    with pytest.raises(DomainError):
        linpred_rate(0.0, 1.0, 0.0)
    with pytest.raises(DimensionError):
        linpred_rate(1.0, 1.0, 0.0, [1.0], [])


def test_reg_params_require_sum_zero_effects():
    with pytest.raises(DomainError):
        RegParams([0.5, 0.5], [0.1, 0.1], [0.0], [[0.3, 0.1]])
    p = RegParams([0.5, 0.5], [0.1, 0.1], [0.0], [[0.3, -0.3]])
    assert variant_of(p) == "zip-reg"
    assert variant_of(RegParams([1.0], [0.1], [0.0], [[0.0]], alpha=[0.3])) == "zinb-reg"


def test_param_validation():
    with pytest.raises(DomainError):
        ZipParams([0.6, 0.6], [0.1, 0.1], np.ones((2, 2)))
    with pytest.raises(DimensionError):
        ZipParams([0.5, 0.5], [0.1], np.ones((2, 2)))
    with pytest.raises(DomainError):
        ZinbParams([1.0], [0.1], np.ones((2, 1)), [0.0])


def test_mixture_data_validation():
    with pytest.raises(DomainError):
        MixtureData(np.array([[1, -1]]))
    with pytest.raises(DimensionError):
        MixtureData(np.ones((3, 2), dtype=int), size_factors=[1.0, 2.0])
    with pytest.raises(DomainError):
        MixtureData(np.ones((2, 2), dtype=int), size_factors=[1.0, 0.0])


def _mixture_by_hand(y, pi, logp):
    return float(logsumexp(np.log(pi)[None, :] + logp, axis=1).sum())


def test_zip_mixture_loglik_by_hand(rng):
    y = rng.poisson(3.0, size=(12, 4))
    y[rng.random(y.shape) < 0.3] = 0
    pi = np.array([0.3, 0.7])
    phi = np.array([0.2, 0.05])
    lam = rng.uniform(0.5, 6.0, (4, 2))
    logp = np.stack([zip_log_pmf(y, lam[:, k][None, :], phi[k]).sum(axis=1) for k in range(2)], axis=1)
    got = mixture_loglik(ZipParams(pi, phi, lam), y)
    assert got == pytest.approx(_mixture_by_hand(y, pi, logp), rel=1e-12)


def test_zinb_reg_loglik_by_hand(rng):
    n, g = 10, 3
    y = rng.poisson(4.0, size=(n, g))
    t = rng.uniform(0.5, 2.0, n)
    x = rng.normal(size=(n, 2))
    pi, phi, alpha = np.array([0.4, 0.6]), np.array([0.1, 0.3]), np.array([0.2, 0.7])
    beta0 = rng.normal(1.0, 0.2, g)
    r = rng.normal(0, 0.3, g)
    rho = np.column_stack([r, -r])
    slopes = rng.normal(0, 0.1, (g, 2))
    par = RegParams(pi, phi, beta0, rho, slopes, alpha)
    logp = np.zeros((n, 2))
    for k in range(2):
        mu = t[:, None] * np.exp(beta0 + rho[:, k] + x @ slopes.T)
        logp[:, k] = zinb_log_pmf(y, mu, alpha[k], phi[k]).sum(axis=1)
    got = mixture_loglik(par, MixtureData(y, t, x))
    assert got == pytest.approx(_mixture_by_hand(y, pi, logp), rel=1e-12)


@pytest.mark.parametrize("nb", [False, True])
def test_shared_rate_path_matches_kernel(rng, nb):
    y = rng.negative_binomial(2, 0.3, size=(50, 20))
    y[rng.random(y.shape) < 0.3] = 0
    data = MixtureData(y)
    base = rng.normal(1.0, 0.5, (20, 3))
    phi = np.array([0.1, 0.5, 1.0])  # phi = 1 must give -inf for rows with positives
    alpha = np.array([0.1, 1.0, 3.0]) if nb else None
    a, ua = shared_rate_logdens(data, base, phi, alpha)
    b, ub = _backend.kernels.cluster_logdens(data.y, np.zeros(50), base, None, phi, alpha, data.row_lfact)
    fin = np.isfinite(b)
    np.testing.assert_array_equal(np.isfinite(a), fin)
    np.testing.assert_allclose(a[fin], b[fin], rtol=1e-11)
    np.testing.assert_allclose(ua, ub, rtol=1e-12)


def test_cluster_log_densities_dimension_check(rng):
    data = MixtureData(rng.poisson(2.0, size=(5, 3)))
    with pytest.raises(DimensionError):
        cluster_log_densities(ZipParams([1.0], [0.1], np.ones((4, 1))), data)


def test_permute_relabels_consistently(rng):
    y = rng.poisson(3.0, size=(8, 3))
    p = ZinbParams([0.2, 0.3, 0.5], [0.1, 0.2, 0.3], rng.uniform(1, 4, (3, 3)), [0.1, 0.2, 0.3])
    q = p.permute([2, 0, 1])
    assert mixture_loglik(p, y) == pytest.approx(mixture_loglik(q, y), rel=1e-13)
    np.testing.assert_array_equal(q.mu[:, 0], p.mu[:, 2])
