"""NumPy implementations of the hot kernels.

Same signatures and formulas as the compiled ``_ckernels`` module; used when
the extension is not built or ``ZIMCLUST_BACKEND=python`` is set.
"""
import numpy as np
from scipy.special import gammaln

# recurrence shifts arguments above this before the asymptotic series
_SHIFT = 10.0
# lgamma/digamma differences switch to power series once nu >= _SERIES * y
_SERIES = 1e4

_DIGAMMA_COEF = (
    -1.0 / 12.0,
    1.0 / 120.0,
    -1.0 / 252.0,
    1.0 / 240.0,
    -1.0 / 132.0,
    691.0 / 32760.0,
    -1.0 / 12.0,
)
_TRIGAMMA_COEF = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def digamma(x):
    x = np.array(x, dtype=float, copy=True)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _SHIFT
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_DIGAMMA_COEF):
        series = (series + c) * inv2
    out = acc + np.log(x) - 0.5 / x + series
    return out[0] if scalar else out


def trigamma(x):
    x = np.array(x, dtype=float, copy=True)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in reversed(_TRIGAMMA_COEF):
        series = (series + c) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return out[0] if scalar else out


def _power_sums(y):
    n = y - 1.0
    s1 = y * n / 2.0
    s2 = n * y * (2.0 * n + 1.0) / 6.0
    s3 = s1 * s1
    s4 = n * y * (2.0 * n + 1.0) * (3.0 * n * n + 3.0 * n - 1.0) / 30.0
    return s1, s2, s3, s4


def lgamma_ratio(y, nu):
    """log Gamma(y + nu) - log Gamma(nu), accurate for nu >> y."""
    y, nu = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(nu, dtype=float))
    out = gammaln(y + nu) - gammaln(nu)
    ser = (nu >= _SERIES * np.maximum(y, 1.0))
    if np.any(ser):
        ys, vs = y[ser], nu[ser]
        s1, s2, s3, s4 = _power_sums(ys)
        iv = 1.0 / vs
        out = np.array(out, copy=True)
        out[ser] = ys * np.log(vs) + iv * (s1 - iv * (s2 / 2.0 - iv * (s3 / 3.0 - iv * s4 / 4.0)))
    return out


def digamma_diff(y, nu):
    """psi(y + nu) - psi(nu)."""
    y, nu = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(nu, dtype=float))
    out = np.zeros(y.shape)
    ser = nu >= _SERIES * np.maximum(y, 1.0)
    if np.any(ser):
        ys, vs = y[ser], nu[ser]
        s1, s2, s3, _ = _power_sums(ys)
        iv = 1.0 / vs
        out[ser] = iv * (ys - iv * (s1 - iv * (s2 - iv * s3)))
    rest = ~ser & (y > 0)
    if np.any(rest):
        out[rest] = digamma(y[rest] + nu[rest]) - digamma(nu[rest])
    return out


def trigamma_diff(y, nu):
    """psi'(y + nu) - psi'(nu)."""
    y, nu = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(nu, dtype=float))
    out = np.zeros(y.shape)
    ser = nu >= _SERIES * np.maximum(y, 1.0)
    if np.any(ser):
        ys, vs = y[ser], nu[ser]
        s1, s2, s3, _ = _power_sums(ys)
        iv = 1.0 / vs
        out[ser] = -iv * iv * (ys - iv * (2.0 * s1 - iv * (3.0 * s2 - iv * 4.0 * s3)))
    rest = ~ser & (y > 0)
    if np.any(rest):
        out[rest] = trigamma(y[rest] + nu[rest]) - trigamma(nu[rest])
    return out


def row_log_factorial(y):
    return gammaln(np.asarray(y, dtype=float) + 1.0).sum(axis=1)


def cluster_logdens(y, off, base, xb, phi, alpha, row_lfact=None):
    """Per-cell, per-cluster log densities and zero-state responsibilities.

    The log rate of entry (n, g) under cluster k is
    ``off[n] + base[g, k] + xb[n, g]`` (``xb`` may be None).  ``alpha`` None
    selects the Poisson count state, otherwise NB with dispersion alpha[k].

    Returns ``(logdens, u)`` where ``logdens`` is N x K and ``u`` holds, for
    every zero entry in row-major order, the K posterior always-zero
    probabilities.
    """
    y = np.asarray(y)
    n, g = y.shape
    k_total = base.shape[1]
    yf = y.astype(float)
    pos = y > 0
    zero = ~pos
    if row_lfact is None:
        row_lfact = row_log_factorial(y)
    logdens = np.empty((n, k_total))
    u = np.empty((int(zero.sum()), k_total))
    lg_ratio_cache = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(k_total):
            eta = off[:, None] + base[None, :, k]
            if xb is not None:
                eta = eta + xb
            mu = np.exp(eta)
            log_phi = np.log(phi[k])
            log_1mphi = np.log1p(-phi[k])
            if alpha is None:
                log_p0 = -mu
                count_part = yf * eta - mu
            else:
                nu = 1.0 / alpha[k]
                log_p0 = -nu * np.log1p(mu / nu)
                lr = lg_ratio_cache.get(nu)
                if lr is None:
                    lr = lgamma_ratio(yf, nu)
                    lg_ratio_cache[nu] = lr
                count_part = lr + log_p0 - yf * np.log1p(nu / mu)
            zero_term = np.logaddexp(log_phi, log_1mphi + log_p0)
            lp = np.where(pos, log_1mphi + count_part, zero_term)
            logdens[:, k] = lp.sum(axis=1) - row_lfact
            u[:, k] = np.exp(log_phi - zero_term[zero])
    return logdens, u


def nb_dispersion_terms(y, w, logmu, nu):
    """Weighted NB objective in the size parameter and its first two derivatives.

    Returns ``(q, dq/dnu, d2q/dnu2)`` summed over entries, dropping the
    nu-free ``log y!`` term.
    """
    yf = np.asarray(y, dtype=float)
    mu = np.exp(logmu)
    r = mu / nu
    q = w * (lgamma_ratio(yf, nu) - nu * np.log1p(r) - yf * np.log1p(1.0 / r))
    s = w * (digamma_diff(yf, nu) - np.log1p(r) + (mu - yf) / (nu + mu))
    h = w * (trigamma_diff(yf, nu) + mu / (nu * (nu + mu)) - (mu - yf) / (nu + mu) ** 2)
    return float(q.sum()), float(s.sum()), float(h.sum())
