import warnings

import mpmath as mp
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from scipy import optimize

from zimclust.em import (
    assign_clusters,
    e_step,
    m_step,
    m_step_closed,
    n_free_params,
    run_em,
)
from zimclust.errors import EmptyClusterError, NumericalError
from zimclust.likelihood import MixtureData, RegParams, ZinbParams, ZipParams, mixture_loglik

mp.mp.dps = 40


def random_params(rng, variant, g, k, p=0):
    pi = rng.dirichlet(np.ones(k) * 3)
    phi = rng.uniform(0.05, 0.5, k)
    if variant == "zip":
        return ZipParams(pi, phi, rng.uniform(0.5, 8.0, (g, k)))
    if variant == "zinb":
        return ZinbParams(pi, phi, rng.uniform(0.5, 8.0, (g, k)), rng.uniform(0.05, 1.0, k))
    r = rng.normal(0, 0.5, (g, k))
    r -= r.mean(axis=1, keepdims=True)
    alpha = rng.uniform(0.05, 1.0, k) if variant == "zinb-reg" else None
    return RegParams(pi, phi, rng.normal(1.0, 0.4, g), r, rng.normal(0, 0.1, (g, p)), alpha)


def random_data(rng, n, g, p=0, reg=False):
    y = rng.poisson(rng.uniform(0.5, 6.0, g), size=(n, g))
    y[rng.random(y.shape) < 0.25] = 0
    t = rng.uniform(0.5, 2.0, n) if reg else None
    x = rng.normal(size=(n, p)) if (reg and p) else None
    return MixtureData(y, t, x)


# -- E-step ----------------------------------------------------------------------

def _brute_posteriors(y, params):
    """Bayes rule entry by entry in extended precision (zip / zinb)."""
    n, g = y.shape
    k_total = params.n_clusters
    joint = [[None] * k_total for _ in range(n)]
    u = {}
    for i in range(n):
        for k in range(k_total):
            lp = mp.log(params.pi[k])
            for j in range(g):
                yy = int(y[i, j])
                phi = mp.mpf(params.phi[k])
                if isinstance(params, ZipParams):
                    lam = mp.mpf(params.lam[j, k])
                    pmf = mp.e ** (-lam) * lam**yy / mp.factorial(yy)
                else:
                    mu, nu = mp.mpf(params.mu[j, k]), 1 / mp.mpf(params.alpha[k])
                    pmf = mp.gamma(yy + nu) / (mp.gamma(nu) * mp.factorial(yy)) \
                        * (nu / (nu + mu)) ** nu * (mu / (nu + mu)) ** yy
                if yy == 0:
                    tot = phi + (1 - phi) * pmf
                    u[(i, j, k)] = phi / tot
                else:
                    tot = (1 - phi) * pmf
                lp += mp.log(tot)
            joint[i][k] = lp
    z = np.zeros((n, k_total))
    ll = mp.mpf(0)
    for i in range(n):
        m = max(joint[i])
        s = sum(mp.e ** (v - m) for v in joint[i])
        ll += m + mp.log(s)
        for k in range(k_total):
            z[i, k] = float(mp.e ** (joint[i][k] - m) / s)
    return z, u, float(ll)


@pytest.mark.parametrize("variant", ["zip", "zinb"])
def test_e_step_matches_brute_force(rng, variant):
    for _ in range(10):
        n, g, k = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        data = random_data(rng, n, g)
        params = random_params(rng, variant, g, k)
        es = e_step(params, data)
        z, u, ll = _brute_posteriors(data.y, params)
        np.testing.assert_allclose(es.z_hat, z, atol=1e-10)
        assert es.loglik == pytest.approx(ll, rel=1e-12)
        for idx, (i, j) in enumerate(zip(data.zero_rows, data.zero_cols)):
            for kk in range(k):
                assert abs(es.u_hat[idx, kk] - float(u[(i, j, kk)])) < 1e-10


def test_e_step_rows_sum_to_one(rng):
    data = random_data(rng, 30, 5, p=1, reg=True)
    es = e_step(random_params(rng, "zinb-reg", 5, 3, p=1), data)
    np.testing.assert_allclose(es.z_hat.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all((es.u_hat >= 0) & (es.u_hat <= 1))


def test_e_step_flags_impossible_cell():
    data = MixtureData(np.array([[0, 3], [0, 0]]))
    params = ZipParams([0.5, 0.5], [1.0, 1.0], np.ones((2, 2)))  # every count is a structural zero
    with pytest.raises(NumericalError, match="cell 0"):
        e_step(params, data)


def test_assign_clusters_tie_goes_low():
    assert assign_clusters(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


# -- M-step ----------------------------------------------------------------------

def _q_zip(theta, y, z, u_dense, k):
    """Expected complete-data log-likelihood, zip, as a function of free params."""
    g = y.shape[1]
    logits = np.concatenate([[0.0], theta[: k - 1]])
    log_pi = logits - np.log(np.exp(logits).sum())
    phi = 1 / (1 + np.exp(-theta[k - 1: 2 * k - 1]))
    lam = np.exp(theta[2 * k - 1:].reshape(g, k))
    q = float((z * log_pi).sum())
    for c in range(k):
        u = u_dense[c]
        zc = z[:, c][:, None]
        q += float((zc * (u * np.log(phi[c]) + (1 - u) * (np.log1p(-phi[c]) + y * np.log(lam[:, c]) - lam[:, c]))).sum())
    return q


def test_m_step_zip_matches_numeric_maximum(rng):
    for _ in range(3):
        n, g, k = 25, 2, 2
        data = random_data(rng, n, g)
        params = random_params(rng, "zip", g, k)
        es = e_step(params, data)
        new = m_step(params, data, es)
        u_dense = [es.u_dense(data, c) for c in range(k)]
        y = data.y.astype(float)
        x0 = np.concatenate([np.zeros(k - 1), np.zeros(k), np.log(y.mean(0) + 0.5).repeat(k)])
        res = optimize.minimize(lambda th: -_q_zip(th, y, es.z_hat, u_dense, k), x0, method="BFGS",
                                options={"gtol": 1e-11, "maxiter": 5000})
        logits = np.concatenate([[0.0], res.x[: k - 1]])
        pi = np.exp(logits) / np.exp(logits).sum()
        phi = 1 / (1 + np.exp(-res.x[k - 1: 2 * k - 1]))
        lam = np.exp(res.x[2 * k - 1:]).reshape(g, k)
        np.testing.assert_allclose(new.pi, pi, atol=1e-6)
        np.testing.assert_allclose(new.phi, phi, atol=1e-6)
        np.testing.assert_allclose(new.lam, lam, atol=1e-6)


def test_m_step_zinb_means_with_alpha_fixed(rng):
    data = random_data(rng, 30, 3)
    params = random_params(rng, "zinb", 3, 2)
    es = e_step(params, data)
    new = m_step(params, data, es, fix_alpha=True)
    np.testing.assert_array_equal(new.alpha, params.alpha)
    for c in range(2):
        w = es.z_hat[:, c][:, None] * (1 - es.u_dense(data, c))
        for j in range(3):
            nu = 1 / params.alpha[c]

            def negq(lm, j=j):
                mu = np.exp(lm)
                yy = data.y[:, j]
                return -float(np.sum(w[:, j] * (yy * np.log(mu / (mu + nu)) - nu * np.log1p(mu / nu))))

            ref = optimize.minimize_scalar(negq, bounds=(-5, 5), method="bounded", options={"xatol": 1e-12})
            assert new.mu[j, c] == pytest.approx(np.exp(ref.x), rel=1e-6)


def test_empty_cluster_raises(rng):
    data = random_data(rng, 10, 3)
    params = ZipParams([0.5, 0.5], [0.1, 0.1], np.column_stack([np.full(3, 3.0), np.full(3, 1e6)]))
    es = e_step(params, data)
    with pytest.raises(EmptyClusterError) as info:
        m_step_closed(data, es, iteration=7)
    assert info.value.cluster == 1 and info.value.iteration == 7


# -- full runs -------------------------------------------------------------------

VARIANTS = ["zip", "zinb", "zip-reg", "zinb-reg"]


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2**31 - 1), variant=st.sampled_from(VARIANTS))
def test_em_ascent(seed, variant):
    rng = np.random.default_rng(seed)
    n, g, k, p = int(rng.integers(8, 30)), int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(0, 3))
    reg = variant.endswith("reg")
    data = random_data(rng, n, g, p=p if reg else 0, reg=reg)
    params = random_params(rng, variant, g, k, p=p if reg else 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            fit = run_em(data, params, max_iter=60)
        except EmptyClusterError:
            return
    tr = np.asarray(fit.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.maximum(1.0, np.abs(tr[:-1])))


def test_run_em_bookkeeping(rng):
    data = random_data(rng, 40, 4)
    fit = run_em(data, random_params(rng, "zip", 4, 2), tol=1e-8)
    assert fit.converged
    assert fit.n_iter == len(fit.loglik_trace) - 1
    assert fit.loglik == pytest.approx(mixture_loglik(fit.params, data), rel=1e-12)
    assert fit.n_params == n_free_params("zip", 2, 4)
    assert fit.aic == pytest.approx(2 * fit.n_params - 2 * fit.loglik)
    assert fit.labels.shape == (40,)


def test_max_iter_cap(rng):
    data = random_data(rng, 40, 4)
    fit = run_em(data, random_params(rng, "zip", 4, 3), tol=0.0, max_iter=3)
    assert fit.n_iter == 3 and not fit.converged


def test_variant_mismatch(rng):
    data = random_data(rng, 10, 2)
    with pytest.raises(ValueError):
        run_em(data, random_params(rng, "zip", 2, 2), variant="zinb")


def test_param_counts():
    assert n_free_params("zip", 3, 10) == 2 + 3 + 30
    assert n_free_params("zinb", 3, 10) == 2 + 3 + 30 + 3
    assert n_free_params("zip-reg", 3, 10, 2) == 2 + 3 + 30 + 20
    assert n_free_params("zinb-reg", 3, 10, 2) == 2 + 3 + 30 + 20 + 3
    with pytest.raises(ValueError):
        n_free_params("hurdle", 2, 2)


def test_small_alpha_limit_matches_zip(rng):
    data = random_data(rng, 60, 5)
    start = random_params(rng, "zip", 5, 2)
    zfit = run_em(data, start, tol=1e-9)
    nb_start = ZinbParams(start.pi, start.phi, start.lam, np.full(2, 1e-8))
    nfit = run_em(data, nb_start, tol=1e-9, fix_alpha=True)
    assert abs(nfit.loglik - zfit.loglik) < 1e-3


def test_size_factors_recover_rates():
    rng = np.random.default_rng(5)
    n, g = 400, 6
    lab = rng.integers(0, 2, n)
    t = rng.uniform(0.5, 2.0, n)
    beta0 = np.log(rng.uniform(3, 8, g))
    r = np.tile([0.6, -0.6], (g, 1))
    mu = t[:, None] * np.exp(beta0[None, :] + r[:, lab].T)
    y = rng.poisson(mu)
    y[rng.random(y.shape) < 0.1] = 0
    start = RegParams([0.5, 0.5], [0.1, 0.1], beta0 + 0.2, 0.8 * r)
    fit = run_em(MixtureData(y, t), start)
    est = fit.params if fit.params.rho[0, 0] > 0 else fit.params.permute([1, 0])
    np.testing.assert_allclose(est.rho, r, atol=0.08)
    np.testing.assert_allclose(est.beta0, beta0, atol=0.08)
    assert fit.monotone
