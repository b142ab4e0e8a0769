# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-cell kernels. Same API and numerics as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport (exp, expm1, log, log1p, sqrt, hypot, lgamma, fabs, floor,
                        INFINITY, isfinite, M_PI)

from ._debye import DEBYE_COEFFS

cnp.import_array()

cdef enum:
    N_DEBYE = 14
    MAX_DEGREE = 40

cdef long DEBYE_MIN_ORDER = 20
cdef double SERIES_ARG_FACTOR = 50.0
cdef long SERIES_MAX_TERMS = 100000
cdef long HANKEL_MAX_TERMS = 400
cdef double TERM_RTOL = 1e-17
cdef double LOG_2PI = log(2.0 * M_PI)

cdef double _debye_c[N_DEBYE][MAX_DEGREE]
cdef int _debye_len[N_DEBYE]

for _k, _poly in enumerate(DEBYE_COEFFS):
    _debye_len[_k] = len(_poly)
    for _i, _c in enumerate(_poly):
        _debye_c[_k][_i] = _c

cdef double[16] _STIRLERR = [
    0.0,
    0.08106146679532726, 0.0413406959554093, 0.02767792568499834,
    0.020790672103765093, 0.016644691189821193, 0.013876128823070748,
    0.01189670994589177, 0.010411265261972096, 0.009255462182712733,
    0.00833056343336287, 0.007573675487951841, 0.00694284010720953,
    0.006408994188004207, 0.0059513701127588475, 0.005554733551962801,
]


cdef inline double _stirlerr(double n) noexcept nogil:
    cdef double nn
    if n <= 15.0:
        return _STIRLERR[<int>n]
    nn = n * n
    if n > 500.0:
        return (1.0 / 12 - (1.0 / 360) / nn) / n
    if n > 80.0:
        return (1.0 / 12 - (1.0 / 360 - (1.0 / 1260) / nn) / nn) / n
    if n > 35.0:
        return (1.0 / 12 - (1.0 / 360 - (1.0 / 1260 - (1.0 / 1680) / nn) / nn) / nn) / n
    return (1.0 / 12 - (1.0 / 360 - (1.0 / 1260 - (1.0 / 1680 - (1.0 / 1188) / nn) / nn) / nn) / nn) / n


cdef inline double _bd0(double x, double lam) noexcept nogil:
    cdef double v, s, s1, ej, v2
    cdef int j
    if fabs(x - lam) < 0.1 * (x + lam):
        v = (x - lam) / (x + lam)
        s = (x - lam) * v
        ej = 2.0 * x * v
        v2 = v * v
        for j in range(1, 1000):
            ej *= v2
            s1 = s + ej / (2 * j + 1)
            if s1 == s:
                return s1
            s = s1
        return s
    return x * log(x / lam) + lam - x


cdef inline double _log_poisson(long k, double lam) noexcept nogil:
    cdef double x = <double>k
    if k == 0:
        return -lam
    return -_stirlerr(x) - _bd0(x, lam) - 0.5 * (LOG_2PI + log(x))


cdef double _series(long n, double v, long* terms, int* ok) noexcept nogil:
    cdef double nf = <double>n
    cdef double half = 0.5 * v
    cdef double q = half * half
    cdef double kmode = floor(0.5 * (sqrt(nf * nf + v * v) - nf))
    cdef double log_tmode = (nf + 2.0 * kmode) * log(half) - lgamma(kmode + 1.0) - lgamma(nf + kmode + 1.0)
    cdef double total = 1.0, t = 1.0, k = kmode
    cdef long used = 1, i
    cdef int up_ok = 0, down_ok = 0
    for i in range(SERIES_MAX_TERMS):
        t = t * q / ((k + 1.0) * (nf + k + 1.0))
        k += 1.0
        total += t
        used += 1
        if t < TERM_RTOL * total:
            up_ok = 1
            break
    t = 1.0
    k = kmode
    if k <= 0.0:
        down_ok = 1
    else:
        for i in range(SERIES_MAX_TERMS):
            t = t * k * (nf + k) / q
            k -= 1.0
            total += t
            used += 1
            if t < TERM_RTOL * total or k <= 0.0:
                down_ok = 1
                break
    terms[0] = used
    ok[0] = up_ok and down_ok
    return log_tmode + log(total) - v


cdef double _hankel(long n, double v, long* terms, int* ok) noexcept nogil:
    cdef double mu = 4.0 * (<double>n) * (<double>n)
    cdef double total = 1.0, term = 1.0, nxt
    cdef long used = 1, k
    cdef int active = 1
    for k in range(1, HANKEL_MAX_TERMS):
        nxt = -term * (mu - (2.0 * k - 1.0) * (2.0 * k - 1.0)) / (8.0 * k * v)
        if fabs(nxt) > fabs(term):
            break
        term = nxt
        total += term
        used += 1
        if fabs(term) < TERM_RTOL * fabs(total):
            active = 0
            break
    terms[0] = used
    ok[0] = (fabs(term) < 1e-15 * fabs(total)) and not active
    return log(total) - 0.5 * (LOG_2PI + log(v))


cdef double _debye(long n, double v, long* terms, int* ok) noexcept nogil:
    cdef double nf = <double>n
    cdef double z = v / nf
    cdef double sq = hypot(1.0, z)
    cdef double p = 1.0 / sq
    cdef double eta_minus = nf / (sq + z) + nf * log(z / (1.0 + sq))
    cdef double total = 0.0, scale = 1.0, poly
    cdef double inv_n = 1.0 / nf
    cdef int kk, i
    for kk in range(N_DEBYE):
        poly = 0.0
        for i in range(_debye_len[kk] - 1, -1, -1):
            poly = poly * p + _debye_c[kk][i]
        total += poly * scale
        scale *= inv_n
    terms[0] = N_DEBYE
    ok[0] = 1
    return eta_minus - 0.5 * (LOG_2PI + log(nf)) - 0.25 * log1p(z * z) + log(total)


cdef double _log_ive(long n, double v, long* terms, int* ok) noexcept nogil:
    if v == 0.0:
        terms[0] = 0
        ok[0] = 1
        return 0.0 if n == 0 else -INFINITY
    if n >= DEBYE_MIN_ORDER:
        return _debye(n, v, terms, ok)
    if v <= SERIES_ARG_FACTOR * (n if n > 1 else 1):
        return _series(n, v, terms, ok)
    return _hankel(n, v, terms, ok)


def log_ive(n, v):
    """log(I_n(v) * exp(-v)) for integer n >= 0 and v >= 0.

    Returns ``(values, terms_used, converged)``.
    """
    n_arr, v_arr = np.broadcast_arrays(
        np.atleast_1d(np.asarray(n, dtype=np.int64)),
        np.atleast_1d(np.asarray(v, dtype=np.float64)),
    )
    cdef const cnp.int64_t[::1] nn = np.ascontiguousarray(n_arr).ravel()
    cdef const double[::1] vv = np.ascontiguousarray(v_arr).ravel()
    cdef Py_ssize_t size = vv.shape[0], i
    out = np.empty(size, dtype=np.float64)
    terms = np.empty(size, dtype=np.int64)
    okv = np.empty(size, dtype=bool)
    cdef double[::1] o = out
    cdef cnp.int64_t[::1] tt = terms
    cdef cnp.npy_bool[::1] kk = okv.view(np.uint8)
    cdef long used
    cdef int good
    with nogil:
        for i in range(size):
            o[i] = _log_ive(nn[i], vv[i], &used, &good)
            tt[i] = used
            kk[i] = good
    shape = v_arr.shape
    return out.reshape(shape), terms.reshape(shape), okv.reshape(shape)


cdef double _debye_logsum(double m, double p) noexcept nogil:
    # log sum_k u_k(p) / m^k
    cdef double total = 0.0, scale = 1.0, poly
    cdef double inv_m = 1.0 / m
    cdef int kk, i
    for kk in range(N_DEBYE):
        poly = 0.0
        for i in range(_debye_len[kk] - 1, -1, -1):
            poly = poly * p + _debye_c[kk][i]
        total += poly * scale
        scale *= inv_m
    return log(total)


cdef double _skellam_debye(long n, double a, double b, double* k) noexcept nogil:
    # large-order terms with the O(lambda) parts cancelled; see _kernels_py
    cdef double nf = <double>n
    cdef double delta = a - b, s = a + b
    cdef double r0 = sqrt(nf * nf + 4.0 * a * b)
    cdef double r1 = sqrt((nf + 1.0) * (nf + 1.0) + 4.0 * a * b)
    cdef double nd = nf - delta
    cdef double r_minus_s = nd * (nf + delta) / (r0 + s)
    cdef double big_l = -log1p((nd + r_minus_s) / (2.0 * a))
    cdef double ls0 = _debye_logsum(nf, nf / r0)
    cdef double ls1 = _debye_logsum(nf + 1.0, (nf + 1.0) / r1)
    cdef double dr = (2.0 * nf + 1.0) / (r1 + r0)
    cdef double c = (dr - (nf + 1.0) * log1p((1.0 + dr) / (nf + r0))
                     - 0.25 * log1p((2.0 * nf + 1.0) / (r0 * r0)) + ls1 - ls0)
    k[0] = expm1(c + big_l)
    return r_minus_s + nf * big_l - 0.5 * (LOG_2PI + log(r0)) + ls0


def skellam_logpmf_grad(z, lam1, lam2):
    """Skellam log-pmf and its derivatives with respect to log lam1 and log lam2."""
    cdef const cnp.int64_t[::1] zz = np.ascontiguousarray(z, dtype=np.int64).ravel()
    cdef const double[::1] l1 = np.ascontiguousarray(lam1, dtype=np.float64).ravel()
    cdef const double[::1] l2 = np.ascontiguousarray(lam2, dtype=np.float64).ravel()
    cdef Py_ssize_t size = zz.shape[0], i
    logpmf = np.empty(size)
    d1 = np.empty(size)
    d2 = np.empty(size)
    okv = np.empty(size, dtype=bool)
    cdef double[::1] lp = logpmf
    cdef double[::1] g1 = d1
    cdef double[::1] g2 = d2
    cdef cnp.npy_bool[::1] kk = okv.view(np.uint8)
    cdef long n, used
    cdef int ok0, ok1
    cdef double a, b, v, li, lpl, root_diff, half_log, k, d_a, d_b
    with nogil:
        for i in range(size):
            n = zz[i] if zz[i] >= 0 else -zz[i]
            if zz[i] < 0:
                a = l2[i]
                b = l1[i]
            else:
                a = l1[i]
                b = l2[i]
            if n >= DEBYE_MIN_ORDER:
                lp[i] = _skellam_debye(n, a, b, &k)
                ok0 = 1
                ok1 = 1
            else:
                v = 2.0 * sqrt(a * b)
                li = _log_ive(n, v, &used, &ok0)
                lpl = _log_ive(n + 1, v, &used, &ok1)
                root_diff = sqrt(a) - sqrt(b)
                half_log = 0.5 * (log(a) - log(b))
                lp[i] = -(root_diff * root_diff) + n * half_log + li
                k = expm1(half_log + lpl - li)
            d_b = b * k
            d_a = (n - (a - b)) + d_b
            if zz[i] < 0:
                g1[i] = d_b
                g2[i] = d_a
            else:
                g1[i] = d_a
                g2[i] = d_b
            kk[i] = ok0 and ok1
    return logpmf, d1, d2, okv


def bp_inner(x, y, log_theta):
    """log sum_k C(x,k) C(y,k) k! theta^k and the posterior mean of k."""
    cdef const cnp.int64_t[::1] xx = np.ascontiguousarray(x, dtype=np.int64).ravel()
    cdef const cnp.int64_t[::1] yy = np.ascontiguousarray(y, dtype=np.int64).ravel()
    cdef const double[::1] lt_in = np.ascontiguousarray(log_theta, dtype=np.float64).ravel()
    cdef Py_ssize_t size = xx.shape[0], i
    log_inner = np.empty(size)
    mean = np.empty(size)
    cdef double[::1] li = log_inner
    cdef double[::1] mm = mean
    cdef long k, kmax
    cdef double lt, m, s0, s1, step, w, xf, yf, kf, scale
    with nogil:
        for i in range(size):
            kmax = xx[i] if xx[i] < yy[i] else yy[i]
            lt = 0.0
            m = 0.0
            s0 = 1.0
            s1 = 0.0
            if kmax > 0 and isfinite(lt_in[i]):
                xf = <double>xx[i]
                yf = <double>yy[i]
                for k in range(kmax):
                    kf = <double>k
                    step = log((xf - kf) * (yf - kf) / (kf + 1.0)) + lt_in[i]
                    lt += step
                    if lt > m:
                        scale = exp(m - lt)
                        s0 *= scale
                        s1 *= scale
                        m = lt
                    w = exp(lt - m)
                    s0 += w
                    s1 += (kf + 1.0) * w
                    if step < 0.0 and lt < m - 40.0:
                        break
            li[i] = m + log(s0)
            mm[i] = s1 / s0
    return log_inner, mean


def log_poisson(k, lam):
    """log Pois(k; lam) for integer k >= 0 and lam > 0 (Loader's saddle-point form)."""
    cdef const cnp.int64_t[::1] kk = np.ascontiguousarray(k, dtype=np.int64).ravel()
    cdef const double[::1] ll = np.ascontiguousarray(lam, dtype=np.float64).ravel()
    cdef Py_ssize_t size = kk.shape[0], i
    out = np.empty(size)
    cdef double[::1] o = out
    with nogil:
        for i in range(size):
            o[i] = _log_poisson(kk[i], ll[i])
    return out
