"""EM / ECM for zero-inflated count mixtures.

Four variants share one loop:

* ``zip``       Poisson count state, free rates lambda_gk
* ``zinb``      NB count state, free means mu_gk, per-cluster dispersion
* ``zip-reg``   Poisson with size-factor offsets and/or covariates
* ``zinb-reg``  NB version of the above

The variant is implied by the parameter object handed to :func:`run_em`.
Each iteration computes responsibilities (E-step, which also gives the
observed log-likelihood for the current parameters) and then updates, in
order, the mixing weights and zero-inflation probabilities, the rate
parameters with dispersion held fixed, and finally the dispersions with the
rates held fixed.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyClusterError, NumericalError, UnderdispersedWarning
from .glm import BETA_BOUND, fit_block, reparameterize, solve_alpha
from .likelihood import (
    MixtureData,
    RegParams,
    ZinbParams,
    ZipParams,
    cluster_log_densities,
    variant_of,
    weighted_log_joint,
)

log = logging.getLogger(__name__)

__all__ = [
    "EStepResult",
    "FitResult",
    "e_step",
    "m_step",
    "m_step_closed",
    "assign_clusters",
    "run_em",
    "n_free_params",
    "MIN_CLUSTER_WEIGHT",
    "RATE_FLOOR",
]

MIN_CLUSTER_WEIGHT = 1e-12
RATE_FLOOR = 1e-10
PHI_CEIL = 1.0 - 1e-12
# rough cap on the N x block x K work arrays of the regression M-step
_BLOCK_BUDGET = 2_000_000


@dataclass
class EStepResult:
    z_hat: np.ndarray  # N x K cluster responsibilities
    u_hat: np.ndarray  # (#zeros) x K, zero-state posteriors at data.zero_rows/cols
    loglik: float
    log_dens: np.ndarray = field(repr=False)  # N x K log p(y_n | k)

    def u_dense(self, data: MixtureData, k: int) -> np.ndarray:
        out = np.zeros(data.y.shape)
        out[data.zero_rows, data.zero_cols] = self.u_hat[:, k]
        return out


@dataclass
class FitResult:
    params: object
    variant: str
    loglik: float
    loglik_trace: list
    n_iter: int
    converged: bool
    z_hat: np.ndarray
    u_hat: np.ndarray
    n_params: int
    n_cells: int
    elapsed: float = 0.0
    seed: int | None = None
    init: str | None = None

    @property
    def labels(self) -> np.ndarray:
        return assign_clusters(self.z_hat)

    @property
    def n_clusters(self) -> int:
        return self.z_hat.shape[1]

    @property
    def aic(self) -> float:
        return 2.0 * self.n_params - 2.0 * self.loglik

    @property
    def bic(self) -> float:
        return self.n_params * np.log(self.n_cells) - 2.0 * self.loglik

    @property
    def monotone(self) -> bool:
        tr = np.asarray(self.loglik_trace)
        if tr.size < 2:
            return True
        slack = 1e-10 * np.maximum(1.0, np.abs(tr[:-1]))
        return bool(np.all(np.diff(tr) >= -slack))


def n_free_params(variant: str, k: int, g: int, p: int = 0) -> int:
    """Free parameter count used by AIC/BIC."""
    base = (k - 1) + k + k * g
    if variant == "zip":
        return base
    if variant == "zinb":
        return base + k
    if variant == "zip-reg":
        return base + g * p
    if variant == "zinb-reg":
        return base + g * p + k
    raise ValueError(f"unknown variant {variant!r}")


def assign_clusters(z_hat) -> np.ndarray:
    """MAP labels; ties go to the lowest cluster index."""
    return np.argmax(np.asarray(z_hat), axis=1)


def e_step(params, data: MixtureData) -> EStepResult:
    log_dens, u = cluster_log_densities(params, data)
    joint = weighted_log_joint(params, log_dens)
    norm = logsumexp(joint, axis=1)
    bad = np.nonzero(~np.isfinite(norm))[0]
    if bad.size:
        raise NumericalError(f"cell {int(bad[0])} has no finite density under any cluster")
    z = np.exp(joint - norm[:, None])
    return EStepResult(z, u, float(norm.sum()), log_dens)


# -- M-step pieces -------------------------------------------------------------

def _cluster_totals(es: EStepResult, iteration=None):
    nk = es.z_hat.sum(axis=0)
    bad = np.nonzero(nk < MIN_CLUSTER_WEIGHT)[0]
    if bad.size:
        k = int(bad[0])
        raise EmptyClusterError(
            f"cluster {k} lost all its weight (sum of responsibilities {nk[k]:.3g})",
            cluster=k,
            iteration=iteration,
        )
    return nk


def _zero_weight(data: MixtureData, es: EStepResult):
    """(#zeros x K) array of z_nk * u_ngk at the zero entries."""
    return es.z_hat[data.zero_rows] * es.u_hat


def m_step_closed(data: MixtureData, es: EStepResult, iteration=None):
    """Mixing weights and zero-inflation probabilities.

    Returns (pi, phi, nk, zw) where zw holds z * u at the zero entries.
    """
    nk = _cluster_totals(es, iteration)
    n, g = data.y.shape
    pi = nk / n
    pi = pi / pi.sum()
    zw = _zero_weight(data, es)
    phi = np.clip(zw.sum(axis=0) / (g * nk), 0.0, PHI_CEIL)
    return pi, phi, nk, zw


def _weighted_means(data: MixtureData, es: EStepResult, nk, zw):
    g = data.n_genes
    num = data.y.T @ es.z_hat  # G x K; y (1 - u) = y since u = 0 off the zeros
    zsum = np.stack(
        [np.bincount(data.zero_cols, weights=zw[:, k], minlength=g) for k in range(nk.size)],
        axis=1,
    )
    den = nk[None, :] - zsum
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(den > 0, num / np.where(den > 0, den, 1.0), RATE_FLOOR)
    return np.maximum(rate, RATE_FLOOR)


def _count_weights(data: MixtureData, es: EStepResult, k: int) -> np.ndarray:
    """N x G weights z_nk (1 - u_ngk) for cluster k."""
    w = np.repeat(es.z_hat[:, k][:, None], data.n_genes, axis=1)
    w[data.zero_rows, data.zero_cols] *= 1.0 - es.u_hat[:, k]
    return w


def _zero_order(data: MixtureData):
    """Zero entries sorted by gene, cached on the data object."""
    cache = getattr(data, "_zero_by_gene", None)
    if cache is None:
        order = np.argsort(data.zero_cols, kind="stable")
        starts = np.searchsorted(data.zero_cols[order], np.arange(data.n_genes + 1))
        cache = (order, starts)
        data._zero_by_gene = cache
    return cache


def _update_alpha(data, es, logmu_fn, alpha, warn):
    new = alpha.copy()
    for k in range(alpha.size):
        w = _count_weights(data, es, k)
        res = solve_alpha(data.y, w, logmu_fn(k), alpha0=alpha[k], warn=warn)
        new[k] = res.alpha
    return new


def _m_step_reg(params: RegParams, data: MixtureData, es: EStepResult, pi, phi):
    n, g = data.y.shape
    k = pi.size
    order, starts = _zero_order(data)
    block = max(1, min(g, _BLOCK_BUDGET // max(1, n * k)))
    off = data.offset
    x = data.covariates
    beta_gk = params.beta_gk.copy()
    slopes = params.beta.copy()
    for lo in range(0, g, block):
        hi = min(g, lo + block)
        w = np.repeat(es.z_hat[:, None, :], hi - lo, axis=1)
        sel = order[starts[lo]:starts[hi]]
        rows, cols = data.zero_rows[sel], data.zero_cols[sel] - lo
        w[rows, cols, :] *= 1.0 - es.u_hat[sel]
        bb, sl, _, _ = fit_block(
            data.y[:, lo:hi], w, off, x, params.alpha,
            beta_gk[lo:hi], slopes[lo:hi] if slopes.shape[1] else None,
        )
        beta_gk[lo:hi] = bb
        if slopes.shape[1]:
            slopes[lo:hi] = sl
    beta0, rho = reparameterize(beta_gk)
    return beta0, rho, slopes


def m_step(params, data: MixtureData, es: EStepResult, fix_alpha=False, iteration=None, warn=True):
    """One ECM sweep; returns new parameters of the same variant."""
    pi, phi, nk, zw = m_step_closed(data, es, iteration)
    if isinstance(params, ZipParams):
        return ZipParams(pi, phi, _weighted_means(data, es, nk, zw))
    if isinstance(params, ZinbParams):
        mu = _weighted_means(data, es, nk, zw)
        alpha = params.alpha
        if not fix_alpha:
            logmu = np.log(mu)
            alpha = _update_alpha(data, es, lambda c: logmu[:, c], alpha, warn)
        return ZinbParams(pi, phi, mu, alpha)
    if isinstance(params, RegParams):
        beta0, rho, slopes = _m_step_reg(params, data, es, pi, phi)
        alpha = params.alpha
        if alpha is not None and not fix_alpha:
            base = np.clip(beta0[:, None] + rho, -BETA_BOUND, BETA_BOUND)
            eta = data.offset[:, None] + (0.0 if not slopes.shape[1] else data.covariates @ slopes.T)

            def logmu(c):
                return eta + base[None, :, c]

            alpha = _update_alpha(data, es, logmu, alpha, warn)
        return RegParams(pi, phi, beta0, rho, slopes, alpha)
    raise TypeError(f"not a parameter set: {type(params).__name__}")


def run_em(
    data,
    params,
    variant: str | None = None,
    tol: float = 1e-6,
    max_iter: int = 1000,
    fix_alpha: bool = False,
    seed=None,
    init=None,
) -> FitResult:
    """Iterate E and M steps until the log-likelihood gain is at most ``tol``.

    ``n_iter`` counts completed M-steps.  ``fix_alpha`` keeps NB dispersions
    at their starting values.
    """
    if not isinstance(data, MixtureData):
        data = MixtureData(data)
    if variant is not None and variant != variant_of(params):
        raise ValueError(f"variant {variant!r} does not match {type(params).__name__}")
    variant = variant_of(params)
    started = time.perf_counter()
    trace = []
    converged = False
    warned = False
    n_iter = 0
    while True:
        es = e_step(params, data)
        trace.append(es.loglik)
        if not np.isfinite(es.loglik):
            raise NumericalError(f"log-likelihood became {es.loglik} at iteration {n_iter}")
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol:
            converged = True
            break
        if n_iter >= max_iter:
            break
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", UnderdispersedWarning)
            params = m_step(params, data, es, fix_alpha=fix_alpha, iteration=n_iter)
        for w in caught:
            if not issubclass(w.category, UnderdispersedWarning):
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
            elif not warned:
                warned = True
                warnings.warn(str(w.message), UnderdispersedWarning, stacklevel=2)
        n_iter += 1
    g = data.n_genes
    k = params.n_clusters
    p = params.n_covariates if isinstance(params, RegParams) else 0
    res = FitResult(
        params=params,
        variant=variant,
        loglik=es.loglik,
        loglik_trace=trace,
        n_iter=n_iter,
        converged=converged,
        z_hat=es.z_hat,
        u_hat=es.u_hat,
        n_params=n_free_params(variant, k, g, p),
        n_cells=data.n_cells,
        elapsed=time.perf_counter() - started,
        seed=seed,
        init=init,
    )
    log.debug("%s K=%d: loglik %.4f after %d iterations", variant, k, res.loglik, n_iter)
    return res
