"""Pure NumPy implementation of the per-cell numeric kernels.

This module mirrors ``_kernels.pyx`` function for function and is used when
the compiled extension is unavailable (or when ``MORTGAP_PURE_PYTHON=1``).
Every kernel takes flat, equal-length arrays and works cell-wise.
"""

import numpy as np
from scipy.special import gammaln

from ._debye import DEBYE_COEFFS

# Out-of-range inputs give inf or nan lanes, which callers check, as in the
# compiled backend; the floating-point warnings are not raised.
_quiet = np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore")

# Region boundaries for log I_n(v); keep in sync with _kernels.pyx.
DEBYE_MIN_ORDER = 20
SERIES_ARG_FACTOR = 50.0
SERIES_MAX_TERMS = 100_000
HANKEL_MAX_TERMS = 400
TERM_RTOL = 1e-17

_LOG_2PI = np.log(2.0 * np.pi)

# stirlerr(n) = log(n!) - (n + 1/2) log(n) + n - log(2 pi)/2 for n = 0..15
_STIRLERR = np.array([
    0.0,
    0.08106146679532726, 0.0413406959554093, 0.02767792568499834,
    0.020790672103765093, 0.016644691189821193, 0.013876128823070748,
    0.01189670994589177, 0.010411265261972096, 0.009255462182712733,
    0.00833056343336287, 0.007573675487951841, 0.00694284010720953,
    0.006408994188004207, 0.0059513701127588475, 0.005554733551962801,
])


def _stirlerr(n):
    n = np.asarray(n, dtype=float)
    out = np.empty_like(n)
    small = n <= 15
    out[small] = _STIRLERR[n[small].astype(np.int64)]
    big = ~small
    if np.any(big):
        nb = n[big]
        nn = nb * nb
        s0, s1, s2, s3, s4 = 1 / 12, 1 / 360, 1 / 1260, 1 / 1680, 1 / 1188
        r = np.where(
            nb > 500, (s0 - s1 / nn) / nb,
            np.where(
                nb > 80, (s0 - (s1 - s2 / nn) / nn) / nb,
                np.where(
                    nb > 35, (s0 - (s1 - (s2 - s3 / nn) / nn) / nn) / nb,
                    (s0 - (s1 - (s2 - (s3 - s4 / nn) / nn) / nn) / nn) / nb,
                ),
            ),
        )
        out[big] = r
    return out


def _bd0(x, lam):
    """Deviance term x log(x/lam) + lam - x, accurate when x is close to lam."""
    out = np.empty_like(lam)
    near = np.abs(x - lam) < 0.1 * (x + lam)
    far = ~near
    if np.any(far):
        xf, lf = x[far], lam[far]
        out[far] = xf * np.log(xf / lf) + lf - xf
    if np.any(near):
        xn, ln = x[near], lam[near]
        v = (xn - ln) / (xn + ln)
        s = (xn - ln) * v
        ej = 2.0 * xn * v
        v2 = v * v
        for j in range(1, 1000):
            ej = ej * v2
            s1 = s + ej / (2 * j + 1)
            if np.array_equal(s1, s):
                break
            s = s1
        out[near] = s
    return out


@_quiet
def log_poisson(k, lam):
    """log Pois(k; lam) for integer k >= 0 and lam > 0 (Loader's saddle-point form)."""
    k = np.asarray(k, dtype=np.int64)
    lam = np.asarray(lam, dtype=float)
    x = k.astype(float)
    out = np.empty_like(lam)
    zero = k == 0
    out[zero] = -lam[zero]
    pos = ~zero
    if np.any(pos):
        xp = x[pos]
        out[pos] = -_stirlerr(xp) - _bd0(xp, lam[pos]) - 0.5 * (_LOG_2PI + np.log(xp))
    return out


def _series(n, v):
    # ascending series, summed outward from the largest term; returns log(I_n(v) e^-v)
    nf = n.astype(float)
    half = 0.5 * v
    q = half * half
    kmode = np.floor(0.5 * (np.sqrt(nf * nf + v * v) - nf))
    log_tmode = (nf + 2.0 * kmode) * np.log(half) - gammaln(kmode + 1.0) - gammaln(nf + kmode + 1.0)

    total = np.ones_like(v)
    terms = np.ones(v.shape, dtype=np.int64)
    # upward
    t = np.ones_like(v)
    k = kmode.copy()
    active = np.ones(v.shape, dtype=bool)
    for _ in range(SERIES_MAX_TERMS):
        if not active.any():
            break
        t = np.where(active, t * q / ((k + 1.0) * (nf + k + 1.0)), t)
        k = k + active
        total = total + np.where(active, t, 0.0)
        terms = terms + active
        active &= t >= TERM_RTOL * total
    up_ok = ~active
    # downward
    t = np.ones_like(v)
    k = kmode.copy()
    active = k > 0
    for _ in range(SERIES_MAX_TERMS):
        if not active.any():
            break
        t = np.where(active, t * k * (nf + k) / q, t)
        k = k - active
        total = total + np.where(active, t, 0.0)
        terms = terms + active
        active &= (t >= TERM_RTOL * total) & (k > 0)
    ok = up_ok & ~active
    return log_tmode + np.log(total) - v, terms, ok


def _hankel(n, v):
    # large-argument expansion: I_n(v) ~ e^v / sqrt(2 pi v) sum_k (-1)^k a_k(n) / v^k
    mu = 4.0 * n.astype(float) ** 2
    total = np.ones_like(v)
    term = np.ones_like(v)
    terms = np.ones(v.shape, dtype=np.int64)
    active = np.ones(v.shape, dtype=bool)
    for k in range(1, HANKEL_MAX_TERMS):
        if not active.any():
            break
        nxt = -term * (mu - (2.0 * k - 1.0) ** 2) / (8.0 * k * v)
        # stop at the smallest term: the expansion diverges past it
        active &= np.abs(nxt) <= np.abs(term)
        term = np.where(active, nxt, term)
        total = total + np.where(active, term, 0.0)
        terms = terms + active
        active &= np.abs(term) >= TERM_RTOL * np.abs(total)
    ok = (np.abs(term) < 1e-15 * np.abs(total)) & ~active
    return np.log(total) - 0.5 * (_LOG_2PI + np.log(v)), terms, ok


def _debye(n, v):
    nf = n.astype(float)
    z = v / nf
    sq = np.hypot(1.0, z)
    p = 1.0 / sq
    # n * eta - v with eta = sqrt(1 + z^2) + log(z / (1 + sqrt(1 + z^2)))
    eta_minus = nf / (sq + z) + nf * np.log(z / (1.0 + sq))
    total = np.zeros_like(v)
    inv_n = 1.0 / nf
    scale = np.ones_like(v)
    for coeffs in DEBYE_COEFFS:
        poly = np.zeros_like(v)
        for c in reversed(coeffs):
            poly = poly * p + c
        total = total + poly * scale
        scale = scale * inv_n
    out = eta_minus - 0.5 * (_LOG_2PI + np.log(nf)) - 0.25 * np.log1p(z * z) + np.log(total)
    terms = np.full(v.shape, len(DEBYE_COEFFS), dtype=np.int64)
    return out, terms, np.ones(v.shape, dtype=bool)


@_quiet
def log_ive(n, v):
    """log(I_n(v) * exp(-v)) for integer n >= 0 and v >= 0.

    Returns ``(values, terms_used, converged)``.
    """
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    n, v = np.broadcast_arrays(n, v)
    out = np.empty(v.shape, dtype=float)
    terms = np.zeros(v.shape, dtype=np.int64)
    ok = np.ones(v.shape, dtype=bool)

    at_zero = v == 0.0
    out[at_zero] = np.where(n[at_zero] == 0, 0.0, -np.inf)

    debye = (n >= DEBYE_MIN_ORDER) & ~at_zero
    series = (n < DEBYE_MIN_ORDER) & ~at_zero & (v <= SERIES_ARG_FACTOR * np.maximum(n, 1))
    hankel = ~(debye | series | at_zero)
    for mask, fn in ((debye, _debye), (series, _series), (hankel, _hankel)):
        if np.any(mask):
            vals, t, c = fn(n[mask], v[mask])
            out[mask], terms[mask], ok[mask] = vals, t, c
    return out, terms, ok


def _debye_logsum(m, p):
    # log sum_k u_k(p) / m^k
    total = np.zeros_like(p)
    inv_m = 1.0 / m
    scale = np.ones_like(p)
    for coeffs in DEBYE_COEFFS:
        poly = np.zeros_like(p)
        for c in reversed(coeffs):
            poly = poly * p + c
        total = total + poly * scale
        scale = scale * inv_m
    return np.log(total)


def _skellam_debye(n, a, b):
    """Large-order Skellam terms with the O(lambda) parts cancelled analytically.

    ``n = |z|`` and ``a`` is the rate on the side of the sign of ``z``.
    Returns ``(logpmf, k)`` where ``k = expm1(log(sqrt(a/b) I_{n+1}(v) / I_n(v)))``.
    """
    nf = n.astype(float)
    delta = a - b
    S = a + b
    R0 = np.sqrt(nf * nf + 4.0 * a * b)          # sqrt(n^2 + v^2)
    R1 = np.sqrt((nf + 1.0) ** 2 + 4.0 * a * b)
    nd = nf - delta
    r_minus_s = nd * (nf + delta) / (R0 + S)     # R0 - S without cancellation
    # L = log(2a / (n + R0))
    L = -np.log1p((nd + r_minus_s) / (2.0 * a))
    ls0 = _debye_logsum(nf, nf / R0)
    ls1 = _debye_logsum(nf + 1.0, (nf + 1.0) / R1)
    logpmf = r_minus_s + nf * L - 0.5 * (_LOG_2PI + np.log(R0)) + ls0
    # c = log(I_{n+1} / I_n) - log(v / (n + R0))
    dR = (2.0 * nf + 1.0) / (R1 + R0)
    lam_ = np.log1p((1.0 + dR) / (nf + R0))
    c = dR - (nf + 1.0) * lam_ - 0.25 * np.log1p((2.0 * nf + 1.0) / (R0 * R0)) + ls1 - ls0
    ok = np.ones(n.shape, dtype=bool)
    return logpmf, np.expm1(c + L), ok


@_quiet
def skellam_logpmf_grad(z, lam1, lam2):
    """Skellam log-pmf and its derivatives with respect to log lam1 and log lam2.

    With ``a`` the rate on the side of the sign of ``z`` and ``b`` the other,
    the derivatives are ``d_b = -b + sqrt(ab) I_{n+1}(v) / I_n(v)`` and
    ``d_a = n - (a - b) + d_b``, written as ``b * expm1(...)`` so that the
    O(lambda) terms cancel exactly.
    """
    z = np.asarray(z, dtype=np.int64)
    lam1 = np.asarray(lam1, dtype=float)
    lam2 = np.asarray(lam2, dtype=float)
    n = np.abs(z)
    neg = z < 0
    a = np.where(neg, lam2, lam1)
    b = np.where(neg, lam1, lam2)
    logpmf = np.empty(a.shape)
    k = np.empty(a.shape)
    ok = np.ones(a.shape, dtype=bool)

    big = n >= DEBYE_MIN_ORDER
    if np.any(big):
        logpmf[big], k[big], ok[big] = _skellam_debye(n[big], a[big], b[big])
    small = ~big
    if np.any(small):
        ns, as_, bs = n[small], a[small], b[small]
        v = 2.0 * np.sqrt(as_ * bs)
        li, _, ok0 = log_ive(ns, v)
        lp, _, ok1 = log_ive(ns + 1, v)
        root_diff = np.sqrt(as_) - np.sqrt(bs)
        half_log = 0.5 * (np.log(as_) - np.log(bs))
        logpmf[small] = -(root_diff * root_diff) + ns * half_log + li
        k[small] = np.expm1(half_log + lp - li)
        ok[small] = ok0 & ok1
    d_b = b * k
    d_a = (n - (a - b)) + d_b
    d1 = np.where(neg, d_b, d_a)
    d2 = np.where(neg, d_a, d_b)
    return logpmf, d1, d2, ok


@_quiet
def bp_inner(x, y, log_theta):
    """log sum_k C(x,k) C(y,k) k! theta^k and the posterior mean of k.

    The posterior mean is E[X3 | X=x, Y=y] of the bivariate Poisson latent
    common component.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    log_theta = np.asarray(log_theta, dtype=float)
    kmax = np.minimum(x, y)
    xf, yf = x.astype(float), y.astype(float)
    lt = np.zeros(x.shape)            # log term k relative to term 0
    m = np.zeros(x.shape)             # running max of lt
    s0 = np.ones(x.shape)             # sum exp(lt - m)
    s1 = np.zeros(x.shape)            # sum k exp(lt - m)
    active = (kmax > 0) & np.isfinite(log_theta)
    k = 0
    while active.any():
        kf = float(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.log((xf - kf) * (yf - kf) / (kf + 1.0)) + log_theta
        lt = np.where(active, lt + step, lt)
        new_max = active & (lt > m)
        scale = np.exp(np.where(new_max, m - lt, 0.0))
        s0 = s0 * scale
        s1 = s1 * scale
        m = np.where(new_max, lt, m)
        w = np.where(active, np.exp(lt - m), 0.0)
        s0 = s0 + w
        s1 = s1 + (kf + 1.0) * w
        k += 1
        # past the mode (step < 0) and negligible, or exhausted
        active &= (k < kmax) & ~((step < 0) & (lt < m - 40.0))
    return m + np.log(s0), s1 / s0
