"""Weighted log-link regressions used inside the M-step.

For one gene the count-state part of the expected complete-data
log-likelihood is a Poisson (or NB, with fixed per-cluster dispersion) GLM
with K cluster intercepts and P slopes shared across clusters::

    log mu_nk = off_n + b_k + x_n . beta

with case weights w_nk = E[z_nk (1 - u_nk)].  The solvers below run Fisher
scoring on a block of genes at once (numpy batched solves), with step halving
so the objective never goes down.  Cluster intercepts are returned in the
(beta0, rho) parameterisation with rho summing to zero.

Dispersion updates (``solve_alpha``) work on t = log(alpha) using the
per-cluster sums from the kernel backend.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import (
    DimensionError,
    DomainError,
    NoProgressError,
    SingularSystemError,
    UnderdispersedWarning,
)

__all__ = [
    "GeneRegressionProblem",
    "GeneCoefficients",
    "AlphaResult",
    "fit_gene_poisson",
    "fit_gene_nb",
    "fit_block",
    "gene_objective",
    "gene_score",
    "alpha_score",
    "reparameterize",
    "solve_alpha",
    "digamma",
    "ALPHA_BOUNDS",
    "BETA_BOUND",
]

ALPHA_BOUNDS = (1e-8, 1e4)
# cluster intercepts are kept in [-BETA_BOUND, BETA_BOUND]; a cluster with no
# weighted counts for a gene would otherwise drift to -inf
BETA_BOUND = 30.0
MAX_HALVINGS = 30
RIDGE = 1e-10


def digamma(x):
    if np.any(~(np.asarray(x, dtype=float) > 0)):
        raise DomainError("digamma is only provided for positive arguments")
    return kernels.digamma(x)


@dataclass
class GeneRegressionProblem:
    y: np.ndarray  # N counts for one gene
    weights: np.ndarray  # N x K
    offset: np.ndarray | None = None  # N, log size factors
    covariates: np.ndarray | None = None  # N x P

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.size
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim == 1:
            self.weights = self.weights[:, None]
        if self.weights.shape[0] != n:
            raise DimensionError("weights must have one row per cell")
        if np.any(self.weights < 0):
            raise DomainError("weights must be non-negative")
        self.offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, float).ravel()
        if self.offset.size != n:
            raise DimensionError("offset must have one entry per cell")
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float).reshape(n, -1)

    @property
    def n_clusters(self):
        return self.weights.shape[1]

    @property
    def n_covariates(self):
        return 0 if self.covariates is None else self.covariates.shape[1]


@dataclass
class GeneCoefficients:
    beta0: float
    rho: np.ndarray  # K, sums to zero
    beta: np.ndarray  # P
    n_iter: int = 0
    converged: bool = True

    @property
    def intercepts(self):
        return self.beta0 + self.rho


def reparameterize(beta_gk):
    """Split free intercepts (G x K) into a gene mean and zero-sum effects."""
    beta_gk = np.asarray(beta_gk, dtype=float)
    beta0 = beta_gk.mean(axis=-1)
    return beta0, beta_gk - beta0[..., None]


# -- objective pieces ----------------------------------------------------------

def _eta(off, X, beta, b):
    # off (N,), beta (B,K), b (B,P) -> (N,B,K)
    eta = off[:, None, None] + beta[None, :, :]
    if X is not None and b.shape[1]:
        eta = eta + (X @ b.T)[:, :, None]
    return eta


def _objective(y, w, eta, nu):
    """Per-gene weighted count log-likelihood (terms free of coefficients dropped)."""
    mu = np.exp(eta)
    yy = y[:, :, None]
    if nu is None:
        ll = yy * eta - mu
    else:
        with np.errstate(divide="ignore"):
            ll = -yy * np.log1p(nu / mu) - nu * np.log1p(mu / nu)
        ll = np.where(yy > 0, ll, -nu * np.log1p(mu / nu))
    return np.einsum("nbk,nbk->b", w, ll)


def _score_info(y, w, eta, X, alpha):
    mu = np.exp(eta)
    yy = y[:, :, None]
    if alpha is None:
        r = w * (yy - mu)
        wt = w * mu
    else:
        den = 1.0 + alpha[None, None, :] * mu
        r = w * (yy - mu) / den
        wt = w * mu / den
    s_k = r.sum(axis=0)  # (B,K)
    h_kk = wt.sum(axis=0)
    if X is None:
        return s_k, None, h_kk, None, None
    s_p = (X.T @ r.sum(axis=2)).T  # (B,P)
    h_kp = np.einsum("nbk,np->bkp", wt, X)
    h_pp = np.einsum("nb,np,nq->bpq", wt.sum(axis=2), X, X)
    return s_k, s_p, h_kk, h_kp, h_pp


def _solve(h, s):
    try:
        return np.linalg.solve(h, s[..., None])[..., 0]
    except np.linalg.LinAlgError:
        pass
    scale = np.maximum(np.abs(np.diagonal(h, axis1=1, axis2=2)).max(axis=1), 1.0)
    eye = np.eye(h.shape[1])[None]
    try:
        out = np.linalg.solve(h + RIDGE * scale[:, None, None] * eye, s[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("information matrix is singular even after ridge") from exc
    if not np.all(np.isfinite(out)):
        raise SingularSystemError("non-finite Fisher scoring step")
    return out


def fit_block(y, w, off=None, X=None, alpha=None, beta=None, b=None, tol=1e-8, max_iter=50):
    """Fisher scoring for a block of genes.

    y (N,B) counts, w (N,B,K) weights, off (N,) offsets, X (N,P) covariates,
    alpha (K,) NB dispersions or None for Poisson.  ``beta`` (B,K) and ``b``
    (B,P) are starting values.  Returns (beta, b, n_iter, status) where status
    is 1 for converged genes, -1 where step halving found no ascent and 0 if
    the iteration cap was hit.
    """
    y = np.asarray(y, dtype=float)
    n, nb = y.shape
    k = w.shape[2]
    off = np.zeros(n) if off is None else np.asarray(off, dtype=float)
    if X is not None and X.shape[1] == 0:
        X = None
    p = 0 if X is None else X.shape[1]
    alpha = None if alpha is None else np.asarray(alpha, dtype=float)
    nu = None if alpha is None else 1.0 / alpha[None, None, :]

    if beta is None:
        num = np.einsum("nbk,nb->bk", w, y)
        den = np.einsum("nbk,n->bk", w, np.exp(off))
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = np.log(np.maximum(num, 1e-300) / np.maximum(den, 1e-300))
    beta = np.clip(np.array(beta, dtype=float), -BETA_BOUND, BETA_BOUND)
    b = np.zeros((nb, p)) if b is None else np.array(b, dtype=float).reshape(nb, p)

    if alpha is None and p == 0:
        # Poisson with offsets only: the weighted score equation is explicit
        num = np.einsum("nbk,nb->bk", w, y)
        den = np.einsum("nbk,n->bk", w, np.exp(off))
        with np.errstate(divide="ignore", invalid="ignore"):
            closed = np.log(num / den)
        closed = np.where(den > 0, closed, beta)
        return np.clip(closed, -BETA_BOUND, BETA_BOUND), b, 1, np.ones(nb, dtype=int)

    active = np.arange(nb)
    status = np.zeros(nb, dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        ya, wa = y[:, active], w[:, active]
        eta = _eta(off, X, beta[active], b[active])
        obj = _objective(ya, wa, eta, nu)
        s_k, s_p, h_kk, h_kp, h_pp = _score_info(ya, wa, eta, X, alpha)
        if p == 0:
            safe = np.where(h_kk > 0, h_kk, 1.0)
            step_k = np.where(h_kk > 0, s_k / safe, 0.0)
            step_p = np.zeros((active.size, 0))
        else:
            h = np.zeros((active.size, k + p, k + p))
            idx = np.arange(k)
            h[:, idx, idx] = h_kk
            h[:, :k, k:] = h_kp
            h[:, k:, :k] = np.transpose(h_kp, (0, 2, 1))
            h[:, k:, k:] = h_pp
            # clusters with no weight for a gene get a unit pivot (no step)
            empty = h_kk <= 0
            if np.any(empty):
                gi, ki = np.nonzero(empty)
                h[gi, ki, :] = 0.0
                h[gi, :, ki] = 0.0
                h[gi, ki, ki] = 1.0
                s_k = np.where(empty, 0.0, s_k)
            step = _solve(h, np.concatenate([s_k, s_p], axis=1))
            step_k, step_p = step[:, :k], step[:, k:]

        # step halving, gene by gene, accepting only non-decreasing objective
        scale = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        new_beta = beta[active].copy()
        new_b = b[active].copy()
        pending = np.arange(active.size)
        for _ in range(MAX_HALVINGS + 1):
            cand_beta = np.clip(beta[active][pending] + scale[pending, None] * step_k[pending],
                                -BETA_BOUND, BETA_BOUND)
            cand_b = b[active][pending] + scale[pending, None] * step_p[pending]
            cand_obj = _objective(ya[:, pending], wa[:, pending],
                                  _eta(off, X, cand_beta, cand_b), nu)
            ok = np.isfinite(cand_obj) & (cand_obj >= obj[pending])
            sel = pending[ok]
            new_beta[sel] = cand_beta[ok]
            new_b[sel] = cand_b[ok]
            accepted[sel] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            scale[pending] *= 0.5

        moved = np.abs(new_beta - beta[active]).max(axis=1)
        if p:
            moved = np.maximum(moved, np.abs(new_b - b[active]).max(axis=1))
        beta[active] = new_beta
        b[active] = new_b
        small = moved <= tol * (1.0 + np.abs(new_beta).max(axis=1))
        status[active[small]] = 1
        status[active[~accepted & ~small]] = -1
        finished = small | ~accepted
        active = active[~finished]
        if active.size == 0:
            break
    return beta, b, it, status


def _single(problem: GeneRegressionProblem, alpha, init):
    y = problem.y[:, None]
    w = problem.weights[:, None, :]
    beta = b = None
    if init is not None:
        beta = np.atleast_2d(init.intercepts)
        b = np.atleast_2d(init.beta) if init.beta.size else None
    alpha = None if alpha is None else np.broadcast_to(np.asarray(alpha, float), (problem.n_clusters,))
    beta, b, it, status = fit_block(y, w, problem.offset, problem.covariates, alpha, beta, b)
    beta0, rho = reparameterize(beta[0])
    coef = GeneCoefficients(float(beta0), rho, b[0], n_iter=it, converged=bool(status[0] == 1))
    if status[0] == -1:
        # halving found no ascent; fine if we are already at a stationary point
        s_k, s_p = gene_score(problem, coef, alpha)
        grad = max(np.abs(s_k).max(initial=0.0), np.abs(s_p).max(initial=0.0))
        if grad > 1e-6 * (1.0 + np.abs(problem.weights).sum() * (1.0 + problem.y.mean())):
            raise NoProgressError(f"step halving exhausted with gradient {grad:.3g}")
        coef.converged = True
    return coef


def fit_gene_poisson(problem: GeneRegressionProblem, init: GeneCoefficients | None = None):
    return _single(problem, None, init)


def fit_gene_nb(problem: GeneRegressionProblem, alpha, init: GeneCoefficients | None = None):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise DomainError("alpha must be positive")
    return _single(problem, alpha, init)


def _coef_arrays(problem, coef):
    beta = np.atleast_2d(np.asarray(coef.intercepts, dtype=float))
    b = np.asarray(coef.beta, dtype=float).reshape(1, -1)
    return beta, b


def gene_objective(problem: GeneRegressionProblem, coef: GeneCoefficients, alpha=None) -> float:
    beta, b = _coef_arrays(problem, coef)
    nu = None if alpha is None else 1.0 / np.broadcast_to(np.asarray(alpha, float), (problem.n_clusters,))[None, None, :]
    eta = _eta(problem.offset, problem.covariates, beta, b)
    return float(_objective(problem.y[:, None], problem.weights[:, None, :], eta, nu)[0])


def gene_score(problem: GeneRegressionProblem, coef: GeneCoefficients, alpha=None):
    """Gradient of ``gene_objective`` w.r.t. (intercepts, slopes)."""
    beta, b = _coef_arrays(problem, coef)
    a = None if alpha is None else np.broadcast_to(np.asarray(alpha, float), (problem.n_clusters,))
    eta = _eta(problem.offset, problem.covariates, beta, b)
    s_k, s_p, *_ = _score_info(problem.y[:, None], problem.weights[:, None, :], eta, problem.covariates, a)
    return s_k[0], (np.zeros(0) if s_p is None else s_p[0])


# -- dispersion ----------------------------------------------------------------

@dataclass
class AlphaResult:
    alpha: float
    objective: float
    n_iter: int
    at_bound: bool = False


def alpha_score(y, w, logmu, alpha) -> float:
    """dQ/dalpha of the weighted NB objective, written directly in alpha."""
    y = np.asarray(y, dtype=float)
    mu = np.exp(np.broadcast_to(logmu, y.shape))
    nu = 1.0 / alpha
    lead = (np.log1p(alpha * mu) - kernels.digamma_diff(y, nu)) / alpha**2
    return float(np.sum(w * (lead + (y - mu) / (alpha * (1.0 + alpha * mu)))))


def _t_terms(y, w, logmu, t):
    nu = math.exp(-t)
    q, s, h = kernels.nb_dispersion_terms(y, w, logmu, nu)
    return q, -nu * s, nu * s + nu * nu * h


def solve_alpha(y, w, logmu, alpha0=1.0, bounds=ALPHA_BOUNDS, tol=1e-10, max_iter=100, warn=True):
    """Maximise the weighted NB objective over one dispersion parameter.

    Safeguarded Newton in t = log(alpha) inside a sign-change bracket.  When
    the score keeps one sign over the whole admissible range the matching
    bound is returned (``UnderdispersedWarning`` at the lower one).  The
    result never has a lower objective than ``alpha0``.
    """
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.ndim == 1:  # kernels work on N x G blocks
        y = y[:, None]
        w = np.reshape(w, (-1, 1))
        logmu = np.reshape(np.broadcast_to(logmu, y.shape[:1]), (-1, 1))
    w = np.ascontiguousarray(np.broadcast_to(w, y.shape), dtype=float)
    logmu = np.ascontiguousarray(np.broadcast_to(logmu, y.shape), dtype=float)
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    t0 = min(max(math.log(alpha0), lo), hi)
    q0, s0, h0 = _t_terms(y, w, logmu, t0)
    qscale = 1.0 + abs(q0)

    def done(t, q, n, bound=False):
        if q < q0:
            return AlphaResult(math.exp(t0), q0, n, t0 in (lo, hi))
        return AlphaResult(math.exp(t), q, n, bound)

    if s0 == 0.0:
        return done(t0, q0, 0)
    if s0 > 0:
        a, b = t0, hi
        qb, sb, hb = _t_terms(y, w, logmu, hi)
        if sb >= 0:
            return done(hi, qb, 1, True)
        t, q, s, h = t0, q0, s0, h0
    else:
        a, b = lo, t0
        qa, sa, ha = _t_terms(y, w, logmu, lo)
        if sa <= 0:
            if warn:
                warnings.warn(
                    f"dispersion at lower bound {bounds[0]:g}; counts look Poisson or underdispersed",
                    UnderdispersedWarning,
                    stacklevel=2,
                )
            return done(lo, qa, 1, True)
        t, q, s, h = t0, q0, s0, h0

    n = 0
    for n in range(1, max_iter + 1):
        if h < 0:
            t_new = t - s / h
            if not (a < t_new < b):
                t_new = 0.5 * (a + b)
        else:
            t_new = 0.5 * (a + b)
        q, s, h = _t_terms(y, w, logmu, t_new)
        step = abs(t_new - t)
        t = t_new
        if s > 0:
            a = t
        else:
            b = t
        if abs(s) <= tol * qscale or step < 1e-12 or (b - a) < 1e-12:
            break
    return done(t, q, n)
