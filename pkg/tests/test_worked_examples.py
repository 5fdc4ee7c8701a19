"""Small hand-checkable cases, one or two per public operation.

Each oracle here is computed independently of the package: by direct
summation, brute-force search, a grid, or a textbook identity.
"""
import itertools
import json
import math

import numpy as np
import pytest
from scipy import optimize, stats

from zimclust import glm
from zimclust._backend import kernels
from zimclust.cli import EXIT_OK, main
from zimclust.data import CountMatrix, compute_size_factors, select_top_sd
from zimclust.em import assign_clusters, e_step, run_em
from zimclust.glm import GeneRegressionProblem, fit_gene_nb, fit_gene_poisson, reparameterize, solve_alpha
from zimclust.likelihood import MixtureData, ZipParams, linpred_rate, zinb_log_pmf, zip_log_pmf
from zimclust.selection import aic, bic, elbow_select, init_kmeans, init_random, initial_size
from zimclust.simlab import (
    SimConfig,
    align_labels,
    mad_rates,
    mse_rates,
    preset,
    run_scenario,
    simulate,
    v_measure,
)


# -- data -----------------------------------------------------------------------

def test_top_sd_against_sort_oracle(rng):
    y = rng.poisson(rng.uniform(0.5, 20, size=5), size=(30, 5))
    _, kept = select_top_sd(CountMatrix(y), 2)
    sds = [float(np.std(y[:, j], ddof=1)) for j in range(5)]
    oracle = sorted(sorted(range(5), key=lambda j: -sds[j])[:2])
    assert list(kept) == oracle


def test_size_factors_are_row_sums(rng):
    y = rng.integers(1, 50, size=(10, 4))
    t = compute_size_factors(CountMatrix(y)).t
    assert t.tolist() == [float(sum(int(v) for v in row)) for row in y]


# -- likelihood -------------------------------------------------------------------

def test_zip_branch_formula():
    want = math.log(0.9 * math.exp(-1.5) * 1.5**2 / 2)
    assert zip_log_pmf(2, 1.5, 0.1) == pytest.approx(want, abs=1e-13)


def test_zinb_geometric_case():
    # alpha = 1 is the geometric pmf (1/(1+mu)) (mu/(1+mu))^y
    assert zinb_log_pmf(1, 2.0, 1.0, 0.0) == pytest.approx(math.log(2 / 9), abs=1e-13)


def test_zinb_poisson_limit():
    assert zinb_log_pmf(3, 2.0, 1e-8, 0.1) == pytest.approx(zip_log_pmf(3, 2.0, 0.1), abs=1e-4)


def test_linpred_rate_size_factor_design():
    assert linpred_rate(10.0, 0.85, 2.0) == pytest.approx(10 * math.exp(2.85), rel=1e-13)
    assert linpred_rate(2.0, 0.5, -0.5) == pytest.approx(2.0)


# -- EM ----------------------------------------------------------------------------

def test_two_cell_posterior():
    data = MixtureData(np.array([[0], [4]]))
    params = ZipParams([0.5, 0.5], [0.0, 0.0], [[1.0, 4.0]])
    z = e_step(params, data).z_hat
    e1, e4 = math.exp(-1), math.exp(-4)
    assert z[0, 0] == pytest.approx(e1 / (e1 + e4), abs=1e-12)
    a, b = e1 * 1**4, e4 * 4**4  # common 1/4! cancels
    assert z[1, 0] == pytest.approx(a / (a + b), abs=1e-12)


def test_row_argmax(rng):
    z = rng.random((100, 3))
    want = [max(range(3), key=lambda k: (row[k], -k)) for row in z]
    assert assign_clusters(z).tolist() == want
    assert assign_clusters([[0.5, 0.5]]).tolist() == [0]


def test_truth_start_recovers_labels_at_600_cells():
    out = run_scenario(preset("zip/sc1", 4, seed=7), replicates=3, workers=1)
    assert np.all(out["v_measure"] == 1.0)
    # reference MSE at N=600 is about 0.056 per cluster
    assert np.all(out["mse"]["lambda"] > 0.056 / 3)
    assert np.all(out["mse"]["lambda"] < 0.056 * 3)


def _zoom_argmax(f, lo, hi, steps=41, rounds=8):
    """Maximise f over a box by repeatedly refining a dense grid."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    for _ in range(rounds):
        axes = [np.linspace(a, b, steps) for a, b in zip(lo, hi)]
        best = max(itertools.product(*axes), key=f)
        width = (hi - lo) / (steps - 1) * 2
        lo, hi = np.asarray(best) - width, np.asarray(best) + width
    return np.asarray(best)


def test_poisson_regression_against_grid():
    y = np.array([0, 2, 1, 5, 3, 7])
    x = np.array([-1.0, -0.5, 0.0, 0.4, 0.8, 1.5])
    w = np.array([1.0, 0.5, 1.0, 0.8, 1.0, 0.3])
    prob = GeneRegressionProblem(y, w[:, None], covariates=x[:, None])
    coef = fit_gene_poisson(prob)

    def ll(v):
        eta = v[0] + v[1] * x
        return float(np.sum(w * (y * eta - np.exp(eta))))

    best = _zoom_argmax(ll, [-3, -3], [3, 3])
    assert coef.intercepts[0] == pytest.approx(best[0], abs=1e-4)
    assert coef.beta[0] == pytest.approx(best[1], abs=1e-4)


def test_nb_regression_against_grid():
    y = np.array([0, 3, 1, 9, 4, 0, 12, 2])
    off = np.log([1.0, 2.0, 1.5, 3.0, 2.0, 0.5, 4.0, 1.0])
    w = np.array([1.0, 0.7, 1.0, 0.9, 1.0, 0.2, 1.0, 0.6])
    alpha = 0.4
    coef = fit_gene_nb(GeneRegressionProblem(y, w[:, None], offset=off), [alpha])

    def ll(v):
        mu = np.exp(v[0] + off)
        nu = 1 / alpha
        return float(np.sum(w * stats.nbinom.logpmf(y, nu, nu / (nu + mu))))

    best = _zoom_argmax(ll, [-3], [3], steps=201)
    assert coef.intercepts[0] == pytest.approx(best[0], abs=1e-4)


def test_reparameterize_examples(rng):
    b0, rho = reparameterize([2.0, 2.0, 2.0])
    assert b0 == 2.0 and np.all(rho == 0)
    b0, rho = reparameterize([1.0, -1.0])
    assert b0 == 0.0 and rho.tolist() == [1.0, -1.0]
    v = rng.normal(size=5)
    b0, rho = reparameterize(v)
    np.testing.assert_allclose(b0 + rho, v, atol=1e-12)


def test_nb_small_alpha_matches_poisson(rng):
    x = rng.normal(size=(40, 1))
    y = rng.poisson(np.exp(1.0 + 0.5 * x[:, 0]))
    w = rng.uniform(0.2, 1, size=(40, 2))
    prob = GeneRegressionProblem(y, w, covariates=x)
    p = fit_gene_poisson(prob)
    nb = fit_gene_nb(prob, [1e-8, 1e-8])
    np.testing.assert_allclose(nb.intercepts, p.intercepts, atol=1e-4)
    np.testing.assert_allclose(nb.beta, p.beta, atol=1e-4)


def test_nb_single_cluster_mean(rng):
    y = rng.negative_binomial(3, 0.4, size=50)
    coef = fit_gene_nb(GeneRegressionProblem(y, np.ones((50, 1))), [0.7])
    assert math.exp(coef.intercepts[0]) == pytest.approx(y.mean(), rel=1e-8)


def test_dispersion_near_truth():
    rng = np.random.default_rng(5)
    y = rng.negative_binomial(5, 5 / 10, size=(4000, 10)).astype(float)
    res = solve_alpha(y, np.ones_like(y), np.full(y.shape, math.log(5.0)))
    assert res.alpha == pytest.approx(0.2, abs=0.015)


def test_digamma_identities():
    psi1 = float(kernels.digamma(np.array([1.0]))[0])
    assert psi1 == pytest.approx(-0.5772156649015329, abs=1e-12)
    assert float(glm.digamma(2.0)) == pytest.approx(psi1 + 1, abs=1e-12)
    assert float(glm.digamma(0.5)) == pytest.approx(psi1 - 2 * math.log(2), abs=1e-12)


# -- initialisation and selection -----------------------------------------------------

def test_kmeans_separates_blobs(rng):
    y = np.vstack([rng.poisson(1.0, (25, 10)), rng.poisson(30.0, (35, 10))])
    params = init_kmeans(MixtureData(y), 2, seed=3)
    means = sorted([y[:25].mean(axis=0), y[25:].mean(axis=0)], key=lambda m: m.sum())
    cols = sorted(params.lam.T, key=lambda m: m.sum())
    for got, want in zip(cols, means):
        np.testing.assert_allclose(got, want)
    assert sorted(params.pi.tolist()) == [25 / 60, 35 / 60]


def test_single_cluster_start(small_counts):
    data = MixtureData(small_counts[0])
    p = init_kmeans(data, 1, seed=0)
    assert p.pi.tolist() == [1.0]
    assert p.phi[0] == pytest.approx(np.mean(data.y == 0))
    np.testing.assert_allclose(p.lam[:, 0], data.y.mean(axis=0))


def test_moment_size_start():
    rng = np.random.default_rng(11)
    assert initial_size(rng.negative_binomial(5, 0.5, size=200_000)) == pytest.approx(5.0, rel=0.05)


def test_random_start_with_singletons(rng):
    y = rng.poisson(4.0, size=(6, 3)) + 1
    p = init_random(MixtureData(y), 6, seed=2)
    assert np.allclose(p.pi, 1 / 6)
    rows = {tuple(r) for r in y.astype(float)}
    assert {tuple(c) for c in p.lam.T} == rows


def test_random_start_is_roughly_uniform():
    y = np.ones((10_000, 2), dtype=int)
    p = init_random(MixtureData(y), 4, seed=9)
    counts = np.round(p.pi * 10_000)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_information_criteria_examples():
    assert aic(0.0, 3) == 6.0
    assert bic(0.0, 2, math.e**2) == pytest.approx(4.0)


def test_single_cluster_aic_against_numeric_mle(rng):
    y = np.where(rng.random((40, 3)) < 0.2, 0, rng.poisson([2.0, 5.0, 9.0], size=(40, 3)))
    data = MixtureData(y)
    fit = run_em(data, init_kmeans(data, 1, seed=0), tol=1e-12)

    def nll(v):
        phi = 1 / (1 + math.exp(-v[0]))
        lam = np.exp(v[1:])
        return -float(np.sum(zip_log_pmf(y, lam[None, :], phi)))

    v0 = np.r_[0.0, np.log(y.mean(axis=0) + 0.5)]
    res = optimize.minimize(nll, v0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12,
                                                                   "maxiter": 20000})
    assert fit.loglik == pytest.approx(-res.fun, abs=1e-6)
    assert fit.aic == pytest.approx(2 * (1 + 3) + 2 * res.fun, abs=1e-5)


def test_elbow_examples():
    assert elbow_select({1: 100, 2: 40, 3: 35, 4: 34}) == 2
    assert elbow_select({2: 10, 3: 20, 4: 30}) == 2
    assert elbow_select({1: 30, 2: 20, 3: 10}) == 1


# -- simulation lab ------------------------------------------------------------------

def test_generator_moments():
    cfg = preset("zip/sc1", 5, seed=21)
    ds = simulate(cfg)
    y = ds.counts.dense()
    lab = ds.truth.labels
    ok = []
    for k in range(cfg.n_clusters):
        keep = (lab == k)[:, None] & ~ds.truth.always_zero
        for g in range(cfg.n_genes):
            vals = y[keep[:, g], g]
            lam = cfg.rates[g, k]
            ok.append(abs(vals.mean() - lam) <= 3 * math.sqrt(lam / vals.size))
    assert np.mean(ok) > 0.98


def test_all_zero_state():
    cfg = SimConfig(variant="zip", n_cells=50, pi=[0.5, 0.5], phi=[1.0, 1.0], rates=np.full((4, 2), 6.0))
    assert not simulate(cfg).counts.dense().any()


def test_zero_fraction_at_least_phi():
    cfg = preset("zip/sc1", 5, seed=22)
    ds = simulate(cfg)
    y = ds.counts.dense()
    for k in range(cfg.n_clusters):
        frac = np.mean(y[ds.truth.labels == k] == 0)
        assert frac >= cfg.phi[k] - 0.01


def test_alignment_anti_diagonal_and_exhaustive(rng):
    assert align_labels(np.fliplr(np.eye(3)) * 10).tolist() == [2, 1, 0]
    for _ in range(20):
        c = rng.integers(0, 20, size=(4, 4))
        perm = align_labels(c)
        best = max(sum(c[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4)))
        assert sum(c[i, perm[i]] for i in range(4)) == best


def test_v_measure_one_flip():
    true = np.r_[np.zeros(50, int), np.ones(50, int)]
    pred = true.copy()
    pred[0] = 1
    ln = math.log
    h_c = ln(2)
    h_k = -(0.49 * ln(0.49) + 0.51 * ln(0.51))
    h_c_given_k = -(0.01 * ln(1 / 51) + 0.50 * ln(50 / 51))
    h_k_given_c = -(0.01 * ln(1 / 50) + 0.49 * ln(49 / 50))
    h, c = 1 - h_c_given_k / h_c, 1 - h_k_given_c / h_k
    assert v_measure(true, pred) == pytest.approx(2 * h * c / (h + c), abs=1e-12)


def test_v_measure_degenerate_and_random(rng):
    true = np.r_[np.zeros(50, int), np.ones(50, int)]
    assert v_measure(true, np.zeros(100, int)) == 0.0
    a, b = rng.integers(0, 3, 5000), rng.integers(0, 3, 5000)
    assert v_measure(a, b) < 0.01


def test_error_summaries():
    assert mse_rates(np.array([1.0]), [np.array([1.1])]) == pytest.approx(0.01)
    assert mad_rates(np.zeros(3), [np.array([1.0, 2.0, 100.0])]) == 2.0


def test_size_factor_beta0_mad_is_small():
    # reference MAD for the gene intercept at N=1200 is 0.00729; treated as an upper bound
    out = run_scenario(preset("zip-sf/sc1", 5, seed=8), replicates=4, workers=1)
    assert out["mad"]["beta0"] <= 0.00729


# -- command line ------------------------------------------------------------------

def _sim(tmp_path, scenario, case, seed=4, reps=1, name="sim"):
    out = tmp_path / name
    assert main(["simulate", "--scenario", scenario, "--case", str(case), "--replicates", str(reps),
                 "--seed", str(seed), "--out", str(out)]) == EXIT_OK
    return out


def _fit(tmp_path, counts, *extra, name="r.json"):
    report = tmp_path / name
    assert main(["fit", "--counts", str(counts), "--out", str(report), *extra]) == EXIT_OK
    return json.loads(report.read_text())


def test_cli_single_cluster(tmp_path):
    sim = _sim(tmp_path, "zip/sc1", 2)
    doc = _fit(tmp_path, sim / "rep001" / "counts.csv", "--model", "zip", "--k", "1", "--restarts", "1")
    assert set(doc["cells"]["labels"]) == {1}


def test_cli_elbow_picks_three(tmp_path):
    sim = _sim(tmp_path, "zip/sc1", 3)
    doc = _fit(tmp_path, sim / "rep001" / "counts.csv", "--model", "zip", "--k-range", "2:5",
               "--restarts", "2")
    assert doc["fit"]["k"] == 3


def test_cli_size_factor_model_beats_plain(tmp_path):
    rep = _sim(tmp_path, "zip-sf/sc1", 3) / "rep001"
    common = ["--k", "2", "--restarts", "2", "--init", "kmeans"]
    sf = _fit(tmp_path, rep / "counts.csv", "--model", "zip-sf", "--size-factors",
              str(rep / "size_factors.csv"), *common, name="sf.json")
    plain = _fit(tmp_path, rep / "counts.csv", "--model", "zip", *common, name="plain.json")
    assert sf["fit"]["aic"] < plain["fit"]["aic"]


def test_cli_replicates_distinct_and_reproducible(tmp_path):
    a = _sim(tmp_path, "zip/sc1", 2, seed=9, reps=2, name="a")
    b = _sim(tmp_path, "zip/sc1", 2, seed=9, reps=2, name="b")
    r1, r2 = (a / "rep001" / "counts.csv").read_text(), (a / "rep002" / "counts.csv").read_text()
    assert r1 != r2
    assert r1 == (b / "rep001" / "counts.csv").read_text()
    assert r2 == (b / "rep002" / "counts.csv").read_text()


def test_cli_zinb_truth_records_sizes(tmp_path):
    rep = _sim(tmp_path, "zinb/sc1", 5) / "rep001"
    truth = json.loads((rep / "truth.json").read_text())
    assert truth["params"]["nu"] == pytest.approx([5.0, 20.0])
    labels = np.asarray(truth["labels"])
    assert labels.size == 1200
