# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, exp, lgamma, INFINITY

cnp.import_array()

cdef double SHIFT = 10.0
cdef double SERIES = 1e4


cdef inline double _digamma(double x) nogil:
    cdef double acc = 0.0, inv2, s
    while x < SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    s = -1.0 / 12.0
    s = (((((((-1.0 / 12.0) * inv2 + 691.0 / 32760.0) * inv2 - 1.0 / 132.0) * inv2
            + 1.0 / 240.0) * inv2 - 1.0 / 252.0) * inv2 + 1.0 / 120.0) * inv2 - 1.0 / 12.0) * inv2
    return acc + log(x) - 0.5 / x + s


cdef inline double _trigamma(double x) nogil:
    cdef double acc = 0.0, inv, inv2, s
    while x < SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    s = ((((((7.0 / 6.0 * inv2 - 691.0 / 2730.0) * inv2 + 5.0 / 66.0) * inv2 - 1.0 / 30.0) * inv2
           + 1.0 / 42.0) * inv2 - 1.0 / 30.0) * inv2 + 1.0 / 6.0) * inv2
    return acc + inv + 0.5 * inv2 + s * inv


cdef inline double _lgamma_ratio(double y, double nu) nogil:
    cdef double n, s1, s2, s3, s4, iv
    if y == 0.0:
        return 0.0
    if nu >= SERIES * y:
        n = y - 1.0
        s1 = y * n / 2.0
        s2 = n * y * (2.0 * n + 1.0) / 6.0
        s3 = s1 * s1
        s4 = n * y * (2.0 * n + 1.0) * (3.0 * n * n + 3.0 * n - 1.0) / 30.0
        iv = 1.0 / nu
        return y * log(nu) + iv * (s1 - iv * (s2 / 2.0 - iv * (s3 / 3.0 - iv * s4 / 4.0)))
    return lgamma(y + nu) - lgamma(nu)


cdef inline double _digamma_diff(double y, double nu) nogil:
    cdef double n, s1, s2, s3, iv
    if y == 0.0:
        return 0.0
    if nu >= SERIES * y:
        n = y - 1.0
        s1 = y * n / 2.0
        s2 = n * y * (2.0 * n + 1.0) / 6.0
        s3 = s1 * s1
        iv = 1.0 / nu
        return iv * (y - iv * (s1 - iv * (s2 - iv * s3)))
    return _digamma(y + nu) - _digamma(nu)


cdef inline double _trigamma_diff(double y, double nu) nogil:
    cdef double n, s1, s2, s3, iv
    if y == 0.0:
        return 0.0
    if nu >= SERIES * y:
        n = y - 1.0
        s1 = y * n / 2.0
        s2 = n * y * (2.0 * n + 1.0) / 6.0
        s3 = s1 * s1
        iv = 1.0 / nu
        return -iv * iv * (y - iv * (2.0 * s1 - iv * (3.0 * s2 - iv * 4.0 * s3)))
    return _trigamma(y + nu) - _trigamma(nu)


cdef inline double _logaddexp(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def _apply(f, x):
    arr = np.array(x, dtype=float)
    flat = arr.ravel()
    cdef double[::1] v = flat
    cdef Py_ssize_t i
    for i in range(v.shape[0]):
        v[i] = f(v[i])
    out = flat.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def _digamma_py(double x):
    return _digamma(x)


def _trigamma_py(double x):
    return _trigamma(x)


def digamma(x):
    return _apply(_digamma_py, x)


def trigamma(x):
    return _apply(_trigamma_py, x)


def _pair(f, y, nu):
    yb, nb = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(nu, dtype=float))
    yv = np.ascontiguousarray(yb).ravel()
    nv = np.ascontiguousarray(nb).ravel()
    out = np.empty(yv.shape[0])
    cdef double[::1] o = out
    cdef const double[::1] a = yv
    cdef const double[::1] b = nv
    cdef Py_ssize_t i
    for i in range(o.shape[0]):
        o[i] = f(a[i], b[i])
    return out.reshape(yb.shape)


def _lgr(double y, double nu):
    return _lgamma_ratio(y, nu)


def _dgd(double y, double nu):
    return _digamma_diff(y, nu)


def _tgd(double y, double nu):
    return _trigamma_diff(y, nu)


def lgamma_ratio(y, nu):
    return _pair(_lgr, y, nu)


def digamma_diff(y, nu):
    return _pair(_dgd, y, nu)


def trigamma_diff(y, nu):
    return _pair(_tgd, y, nu)


def row_log_factorial(y):
    cdef const cnp.int64_t[:, ::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef Py_ssize_t n = yv.shape[0], g = yv.shape[1], i, j
    out = np.zeros(n)
    cdef double[::1] o = out
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(g):
                if yv[i, j] > 1:
                    acc += lgamma(<double>yv[i, j] + 1.0)
            o[i] = acc
    return out


def cluster_logdens(y, off, base, xb, phi, alpha, row_lfact=None):
    cdef const cnp.int64_t[:, ::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef const double[::1] offv = np.ascontiguousarray(off, dtype=float)
    cdef const double[:, ::1] basev = np.ascontiguousarray(base, dtype=float)
    cdef const double[::1] phiv = np.ascontiguousarray(phi, dtype=float)
    cdef Py_ssize_t n = yv.shape[0], g = yv.shape[1], kk = basev.shape[1]
    cdef bint has_xb = xb is not None
    cdef bint poisson = alpha is None
    cdef const double[:, ::1] xbv
    cdef const double[::1] alv
    if has_xb:
        xbv = np.ascontiguousarray(xb, dtype=float)
    else:
        xbv = np.zeros((1, 1))
    if poisson:
        alv = np.ones(kk)
    else:
        alv = np.ascontiguousarray(alpha, dtype=float)
    if row_lfact is None:
        row_lfact = row_log_factorial(yv)
    cdef const double[::1] lfv = np.ascontiguousarray(row_lfact, dtype=float)

    cdef Py_ssize_t n_zero = 0, i, j, k, z
    for i in range(n):
        for j in range(g):
            if yv[i, j] == 0:
                n_zero += 1

    logdens_arr = np.empty((n, kk))
    u_arr = np.empty((n_zero, kk))
    cdef double[:, ::1] ld = logdens_arr
    cdef double[:, ::1] uv = u_arr
    log_phi_arr = np.empty(kk)
    log_1mphi_arr = np.empty(kk)
    cdef double[::1] lphi = log_phi_arr
    cdef double[::1] l1mphi = log_1mphi_arr
    for k in range(kk):
        lphi[k] = log(phiv[k]) if phiv[k] > 0.0 else -INFINITY
        l1mphi[k] = log1p(-phiv[k]) if phiv[k] < 1.0 else -INFINITY

    cdef double eta, mu, nu, yd, acc, lp0, zt, lg
    with nogil:
        for k in range(kk):
            nu = 1.0 / alv[k]
            z = 0
            for i in range(n):
                acc = 0.0
                for j in range(g):
                    eta = offv[i] + basev[j, k]
                    if has_xb:
                        eta = eta + xbv[i, j]
                    mu = exp(eta)
                    if poisson:
                        lp0 = -mu
                    else:
                        lp0 = -nu * log1p(mu / nu)
                    if yv[i, j] == 0:
                        zt = _logaddexp(lphi[k], l1mphi[k] + lp0)
                        acc = acc + zt
                        uv[z, k] = exp(lphi[k] - zt)
                        z += 1
                    else:
                        yd = <double>yv[i, j]
                        if poisson:
                            acc = acc + l1mphi[k] + yd * eta - mu
                        else:
                            acc = acc + l1mphi[k] + _lgamma_ratio(yd, nu) + lp0 - yd * log1p(nu / mu)
                ld[i, k] = acc - lfv[i]
    return logdens_arr, u_arr


def nb_dispersion_terms(y, w, logmu, double nu):
    y = np.ascontiguousarray(y, dtype=np.int64)
    cdef const cnp.int64_t[:, ::1] yv = y
    cdef const double[:, ::1] wv = np.ascontiguousarray(w, dtype=float)
    cdef const double[:, ::1] lm = np.ascontiguousarray(np.broadcast_to(logmu, y.shape), dtype=float)
    cdef Py_ssize_t n = yv.shape[0], g = yv.shape[1], i, j
    cdef double q = 0.0, s = 0.0, h = 0.0, mu, r, yd, ww
    with nogil:
        for i in range(n):
            for j in range(g):
                ww = wv[i, j]
                if ww == 0.0:
                    continue
                yd = <double>yv[i, j]
                mu = exp(lm[i, j])
                r = mu / nu
                q += ww * (_lgamma_ratio(yd, nu) - nu * log1p(r) - yd * log1p(1.0 / r))
                s += ww * (_digamma_diff(yd, nu) - log1p(r) + (mu - yd) / (nu + mu))
                h += ww * (_trigamma_diff(yd, nu) + mu / (nu * (nu + mu)) - (mu - yd) / ((nu + mu) * (nu + mu)))
    return q, s, h
