"""Log densities for zero-inflated Poisson / NB mixtures.

Everything is evaluated in log space: per-cell densities are sums of per-gene
log masses and mixture terms are combined with log-sum-exp, so products over
hundreds of genes never underflow.

Per-gene, per-cluster arrays (rates, means, cluster effects) are stored G x K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.special import gammaln, logsumexp

from ._backend import kernels
from .data import CountMatrix, CovariateMatrix, SizeFactors
from .errors import DimensionError, DomainError

__all__ = [
    "MixtureData",
    "ZipParams",
    "ZinbParams",
    "RegParams",
    "VARIANTS",
    "zip_log_pmf",
    "zinb_log_pmf",
    "linpred_rate",
    "mixture_loglik",
    "cluster_log_densities",
    "shared_rate_logdens",
    "variant_of",
]

VARIANTS = ("zip", "zip-reg", "zinb", "zinb-reg")

_MAX_LOG = math.log(np.finfo(float).max)


@dataclass
class MixtureData:
    """Count matrix plus optional size factors and covariates, ready for fitting.

    Caches the zero positions (row-major) and the per-cell ``sum_g log y!``.
    """

    y: np.ndarray
    size_factors: np.ndarray | None = None
    covariates: np.ndarray | None = None
    zero_rows: np.ndarray = field(init=False, repr=False)
    zero_cols: np.ndarray = field(init=False, repr=False)
    row_lfact: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.y, CountMatrix):
            self.y = self.y.dense()
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.y.ndim != 2:
            raise DimensionError("count data must be N x G")
        if np.any(self.y < 0):
            raise DomainError("counts must be non-negative")
        n = self.y.shape[0]
        if isinstance(self.size_factors, SizeFactors):
            self.size_factors = self.size_factors.t
        if self.size_factors is not None:
            t = np.asarray(self.size_factors, dtype=float).ravel()
            if t.size != n:
                raise DimensionError(f"{t.size} size factors for {n} cells")
            if np.any(~np.isfinite(t)) or np.any(t <= 0):
                raise DomainError("size factors must be positive and finite")
            self.size_factors = t
        if isinstance(self.covariates, CovariateMatrix):
            self.covariates = self.covariates.values
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != n:
                raise DimensionError(f"{x.shape[0]} covariate rows for {n} cells")
            if not np.all(np.isfinite(x)):
                raise DomainError("covariates must be finite")
            self.covariates = np.ascontiguousarray(x) if x.shape[1] else None
        self.zero_rows, self.zero_cols = np.nonzero(self.y == 0)
        self.row_lfact = kernels.row_log_factorial(self.y)

    @property
    def n_cells(self) -> int:
        return self.y.shape[0]

    @cached_property
    def stacked(self) -> np.ndarray:
        """[y | 1(y>0) | 1(y=0)] as one N x 3G float matrix."""
        pos = self.y > 0
        return np.hstack([self.y, pos, ~pos]).astype(float)

    @cached_property
    def n_positive(self) -> np.ndarray:
        return (self.y > 0).sum(axis=1)

    @cached_property
    def value_table(self):
        """Distinct positive counts and a sparse N x U matrix of how often each occurs per cell."""
        rows, cols = np.nonzero(self.y)
        vals, inv = np.unique(self.y[rows, cols], return_inverse=True)
        tab = sparse.csr_matrix(
            (np.ones(rows.size), (rows, inv.ravel())), shape=(self.n_cells, vals.size)
        )
        return vals.astype(float), tab

    @property
    def n_genes(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]

    @property
    def offset(self) -> np.ndarray:
        if self.size_factors is None:
            return np.zeros(self.n_cells)
        return np.log(self.size_factors)

    def take_cells(self, idx) -> "MixtureData":
        idx = np.asarray(idx)
        return MixtureData(
            self.y[idx],
            None if self.size_factors is None else self.size_factors[idx],
            None if self.covariates is None else self.covariates[idx],
        )


def _check_mixing(pi, phi):
    pi = np.asarray(pi, dtype=float).ravel()
    phi = np.asarray(phi, dtype=float).ravel()
    if pi.size != phi.size:
        raise DimensionError("pi and phi must both have length K")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12 * max(1, pi.size):
        raise DomainError(f"pi must lie on the simplex, got sum {pi.sum()!r}")
    if np.any(phi < 0) or np.any(phi > 1) or not np.all(np.isfinite(phi)):
        raise DomainError("phi must lie in [0, 1]")
    return pi, phi


@dataclass
class ZipParams:
    pi: np.ndarray
    phi: np.ndarray
    lam: np.ndarray  # G x K Poisson rates

    def __post_init__(self):
        self.pi, self.phi = _check_mixing(self.pi, self.phi)
        self.lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if self.lam.shape[1] != self.pi.size:
            raise DimensionError(f"rates must be G x K with K={self.pi.size}, got {self.lam.shape}")
        if np.any(~(self.lam > 0)) or not np.all(np.isfinite(self.lam)):
            raise DomainError("Poisson rates must be positive and finite")

    @property
    def n_clusters(self) -> int:
        return self.pi.size

    def permute(self, perm) -> "ZipParams":
        perm = np.asarray(perm)
        return ZipParams(self.pi[perm], self.phi[perm], self.lam[:, perm])


@dataclass
class ZinbParams:
    pi: np.ndarray
    phi: np.ndarray
    mu: np.ndarray  # G x K NB means
    alpha: np.ndarray  # K dispersions, size nu = 1 / alpha

    def __post_init__(self):
        self.pi, self.phi = _check_mixing(self.pi, self.phi)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        k = self.pi.size
        if self.mu.shape[1] != k or self.alpha.size != k:
            raise DimensionError("mu must be G x K and alpha length K")
        if np.any(~(self.mu > 0)) or not np.all(np.isfinite(self.mu)):
            raise DomainError("NB means must be positive and finite")
        if np.any(~(self.alpha > 0)) or not np.all(np.isfinite(self.alpha)):
            raise DomainError("dispersions must be positive and finite")

    @property
    def nu(self) -> np.ndarray:
        return 1.0 / self.alpha

    @property
    def n_clusters(self) -> int:
        return self.pi.size

    def permute(self, perm) -> "ZinbParams":
        perm = np.asarray(perm)
        return ZinbParams(self.pi[perm], self.phi[perm], self.mu[:, perm], self.alpha[perm])


@dataclass
class RegParams:
    """Log-link parameters: log rate = log T_n + beta0_g + rho_gk + x_n . beta_g.

    ``rho`` rows sum to zero; ``alpha`` is None for the Poisson variant.
    """

    pi: np.ndarray
    phi: np.ndarray
    beta0: np.ndarray  # G
    rho: np.ndarray  # G x K
    beta: np.ndarray | None = None  # G x P
    alpha: np.ndarray | None = None  # K

    def __post_init__(self):
        self.pi, self.phi = _check_mixing(self.pi, self.phi)
        self.beta0 = np.asarray(self.beta0, dtype=float).ravel()
        self.rho = np.atleast_2d(np.asarray(self.rho, dtype=float))
        g, k = self.beta0.size, self.pi.size
        if self.rho.shape != (g, k):
            raise DimensionError(f"rho must be {g} x {k}, got {self.rho.shape}")
        if self.beta is None:
            self.beta = np.zeros((g, 0))
        self.beta = np.asarray(self.beta, dtype=float).reshape(g, -1)
        for name in ("beta0", "rho", "beta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} must be finite")
        if np.any(np.abs(self.rho.sum(axis=1)) > 1e-9):
            raise DomainError("cluster effects must sum to zero for every gene")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=float).ravel()
            if self.alpha.size != k:
                raise DimensionError("alpha must have length K")
            if np.any(~(self.alpha > 0)) or not np.all(np.isfinite(self.alpha)):
                raise DomainError("dispersions must be positive and finite")

    @property
    def n_clusters(self) -> int:
        return self.pi.size

    @property
    def n_covariates(self) -> int:
        return self.beta.shape[1]

    @property
    def nu(self):
        return None if self.alpha is None else 1.0 / self.alpha

    @property
    def beta_gk(self) -> np.ndarray:
        """Free per-cluster intercepts beta0_g + rho_gk."""
        return self.beta0[:, None] + self.rho

    def permute(self, perm) -> "RegParams":
        perm = np.asarray(perm)
        return replace(
            self,
            pi=self.pi[perm],
            phi=self.phi[perm],
            rho=self.rho[:, perm],
            alpha=None if self.alpha is None else self.alpha[perm],
        )


def variant_of(params) -> str:
    if isinstance(params, ZipParams):
        return "zip"
    if isinstance(params, ZinbParams):
        return "zinb"
    if isinstance(params, RegParams):
        return "zip-reg" if params.alpha is None else "zinb-reg"
    raise TypeError(f"not a parameter set: {type(params).__name__}")


# -- scalar masses -----------------------------------------------------------

def _check_phi(phi):
    phi = np.asarray(phi, dtype=float)
    if np.any(~((phi >= 0) & (phi <= 1))):
        raise DomainError("phi must lie in [0, 1]")
    return phi


def _finish(out):
    return float(out) if np.ndim(out) == 0 else out


def zip_log_pmf(y, lam, phi):
    """log P(y) under a Poisson(lam) count state inflated at zero by phi."""
    y = np.asarray(y)
    lam = np.asarray(lam, dtype=float)
    phi = _check_phi(phi)
    if np.any(~(lam > 0)):
        raise DomainError("rate must be positive")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DomainError("y must be a non-negative integer")
    y = y.astype(float)
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi)
        log_1mphi = np.log1p(-phi)
        zero = np.logaddexp(log_phi, log_1mphi - lam)
        pos = log_1mphi - lam + y * np.log(lam) - gammaln(y + 1.0)
    return _finish(np.where(y == 0, zero, pos))


def zinb_log_pmf(y, mu, alpha, phi):
    """log P(y) under NB(mean mu, dispersion alpha) inflated at zero by phi."""
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    phi = _check_phi(phi)
    if np.any(~(mu > 0)) or np.any(~(alpha > 0)):
        raise DomainError("mu and alpha must be positive")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DomainError("y must be a non-negative integer")
    y = y.astype(float)
    nu = 1.0 / alpha
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi)
        log_1mphi = np.log1p(-phi)
        log_p0 = -nu * np.log1p(alpha * mu)
        zero = np.logaddexp(log_phi, log_1mphi + log_p0)
        pos = (log_1mphi + kernels.lgamma_ratio(y, nu) - gammaln(y + 1.0)
               + log_p0 - y * np.log1p(nu / mu))
    return _finish(np.where(y == 0, zero, pos))


def linpred_rate(t_n, beta0g, rho_gk, x_row=(), beta_g=()):
    """exp(log t_n + beta0g + rho_gk + x_row . beta_g)."""
    if not t_n > 0:
        raise DomainError("size factor must be positive")
    x_row = np.asarray(x_row, dtype=float).ravel()
    beta_g = np.asarray(beta_g, dtype=float).ravel()
    if x_row.size != beta_g.size:
        raise DimensionError("covariate row and slopes differ in length")
    eta = math.log(t_n) + beta0g + rho_gk + float(x_row @ beta_g)
    if eta > _MAX_LOG:
        raise OverflowError(f"log rate {eta:.1f} exceeds the float range")
    return math.exp(eta)


# -- mixture level -----------------------------------------------------------

def rate_components(params, data: MixtureData):
    """(offset, base, xb, alpha) such that log rate_ngk = off_n + base_gk + xb_ng."""
    k = params.n_clusters
    g = data.n_genes
    if isinstance(params, ZipParams):
        if params.lam.shape != (g, k):
            raise DimensionError(f"rates are {params.lam.shape}, data needs {(g, k)}")
        return np.zeros(data.n_cells), np.log(params.lam), None, None
    if isinstance(params, ZinbParams):
        if params.mu.shape != (g, k):
            raise DimensionError(f"means are {params.mu.shape}, data needs {(g, k)}")
        return np.zeros(data.n_cells), np.log(params.mu), None, params.alpha
    if isinstance(params, RegParams):
        if params.rho.shape != (g, k):
            raise DimensionError(f"cluster effects are {params.rho.shape}, data needs {(g, k)}")
        p = params.n_covariates
        if p != data.n_covariates:
            raise DimensionError(f"params carry {p} covariates, data has {data.n_covariates}")
        xb = data.covariates @ params.beta.T if p else None
        return data.offset, params.beta_gk, xb, params.alpha
    raise TypeError(f"not a parameter set: {type(params).__name__}")


def shared_rate_logdens(data: MixtureData, log_rate, phi, alpha=None):
    """``cluster_logdens`` for rates that do not vary across cells.

    With log rate depending only on (g, k), the per-entry sums collapse into
    matrix products against the count matrix, the positive-entry indicator
    and the zero indicator, plus a lookup table over distinct count values
    for the NB normalising constant.
    """
    k = log_rate.shape[1]
    rate = np.exp(log_rate)
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi)
        log_1mphi = np.log1p(-phi)
    if alpha is None:
        log_p0 = -rate
        per_y = log_rate  # coefficient of y
        per_pos = -rate  # added once per positive entry
        extra = 0.0
    else:
        nu = 1.0 / np.asarray(alpha, dtype=float)
        log_p0 = -nu[None, :] * np.log1p(rate / nu[None, :])
        per_y = -np.log1p(nu[None, :] / rate)
        per_pos = log_p0
        vals, tab = data.value_table
        lgr = np.stack([kernels.lgamma_ratio(vals, v) for v in nu], axis=1)
        extra = tab @ lgr
    zero_term = np.logaddexp(log_phi[None, :], log_1mphi[None, :] + log_p0)  # G x K
    coef = np.vstack([per_y, per_pos, zero_term])
    logdens = data.stacked @ coef + extra - data.row_lfact[:, None]
    # log(1 - phi) once per positive entry; kept out of the product so phi = 1
    # gives -inf rather than 0 * -inf
    with np.errstate(invalid="ignore"):
        logdens += np.where(data.n_positive[:, None] > 0, data.n_positive[:, None] * log_1mphi[None, :], 0.0)
    u = np.exp(log_phi[None, :] - zero_term[data.zero_cols])
    return logdens, u.reshape(-1, k)


def cluster_log_densities(params, data: MixtureData):
    """N x K matrix of log p(y_n | cluster k) and the zero-state posteriors."""
    off, base, xb, alpha = rate_components(params, data)
    if xb is None and not np.any(off):
        return shared_rate_logdens(data, base, params.phi, alpha)
    return kernels.cluster_logdens(
        data.y, off, np.ascontiguousarray(base), xb, params.phi, alpha, data.row_lfact
    )


def weighted_log_joint(params, logdens):
    with np.errstate(divide="ignore"):
        return logdens + np.log(params.pi)[None, :]


def mixture_loglik(params, data) -> float:
    """Observed-data log-likelihood sum_n log sum_k pi_k p(y_n | k)."""
    if not isinstance(data, MixtureData):
        data = MixtureData(data)
    logdens, _ = cluster_log_densities(params, data)
    return float(logsumexp(weighted_log_joint(params, logdens), axis=1).sum())
