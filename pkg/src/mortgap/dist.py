"""Log-probability kernels for the Poisson, bivariate Poisson and Skellam laws.

All public functions accept scalars or array-likes, broadcast their
arguments, and return a float for scalar input or an ``ndarray`` otherwise.
The per-cell numerics live in :mod:`mortgap.kernels` (compiled when
available); this module adds validation, broadcasting and sampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import _kernels_py, kernels

__all__ = [
    "DistributionDomainError",
    "BesselConvergenceWarning",
    "NumericConfig",
    "NUMERIC_CONFIG",
    "BesselResult",
    "log_poisson_pmf",
    "log_bessel_i",
    "log_skellam_pmf",
    "skellam_logpmf_and_grad",
    "log_bivariate_poisson_pmf",
    "bp_conditional_mean_x3",
    "SAMPLER_VERSION",
    "sample_poisson",
    "sample_skellam",
    "sample_bivariate_poisson",
]


class DistributionDomainError(ValueError):
    """Raised when a rate or count lies outside a distribution's domain."""


class BesselConvergenceWarning(RuntimeWarning):
    """Emitted when a Bessel evaluation did not reach its tolerance."""


@dataclass(frozen=True)
class NumericConfig:
    """Tolerances and regime boundaries used by the numeric kernels.

    Attributes
    ----------
    debye_min_order : int
        Orders ``n >= debye_min_order`` use the uniform (Debye) expansion.
    series_arg_factor : float
        Below the Debye order the ascending series is used while
        ``v <= series_arg_factor * max(1, n)``; the large-argument
        expansion is used above.
    series_max_terms : int
        Cap on ascending-series terms in each direction from the mode.
    hankel_max_terms : int
        Cap on large-argument expansion terms.
    term_rtol : float
        A series stops once a term is below ``term_rtol`` times the sum.
    bp_log_cutoff : float
        Bivariate Poisson inner sums stop once past the mode and more than
        this many log units below the largest term.
    """

    debye_min_order: int = _kernels_py.DEBYE_MIN_ORDER
    series_arg_factor: float = _kernels_py.SERIES_ARG_FACTOR
    series_max_terms: int = _kernels_py.SERIES_MAX_TERMS
    hankel_max_terms: int = _kernels_py.HANKEL_MAX_TERMS
    term_rtol: float = _kernels_py.TERM_RTOL
    bp_log_cutoff: float = 40.0


NUMERIC_CONFIG = NumericConfig()


@dataclass(frozen=True)
class BesselResult:
    """Natural log of ``I_n(v)`` with convergence diagnostics.

    Fields are floats/ints for scalar input and arrays otherwise.
    """

    log_value: float | np.ndarray
    converged: bool | np.ndarray
    terms_used: int | np.ndarray


def _shape_out(arr, shape):
    arr = np.asarray(arr).reshape(shape)
    return arr.item() if arr.ndim == 0 else arr


def _as_counts(k, name, signed=False):
    arr = np.asarray(k)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DistributionDomainError(f"{name} must be integer valued")
    elif arr.dtype.kind not in "iub":
        raise DistributionDomainError(f"{name} must be integer valued")
    arr = arr.astype(np.int64)
    if not signed and np.any(arr < 0):
        raise DistributionDomainError(f"{name} must be nonnegative")
    return arr


def _as_rate(lam, name, allow_zero=False):
    arr = np.asarray(lam, dtype=float)
    bad = ~np.isfinite(arr) | ((arr < 0) if allow_zero else (arr <= 0))
    if np.any(bad):
        bound = ">= 0" if allow_zero else "> 0"
        raise DistributionDomainError(f"{name} must be finite and {bound}; got {arr[bad].flat[0]!r}")
    return arr


def log_poisson_pmf(k, lam):
    """Log Poisson probability ``log(exp(-lam) lam**k / k!)``.

    Evaluated with the saddle-point (Stirling error plus deviance) form,
    which keeps full relative accuracy for large ``k`` and ``lam``.

    Raises
    ------
    DistributionDomainError
        If ``lam <= 0`` or ``k`` is negative or non-integer.
    """
    k = _as_counts(k, "k")
    lam = _as_rate(lam, "lam")
    k, lam = np.broadcast_arrays(k, lam)
    out = kernels.log_poisson(k.ravel(), lam.ravel())
    return _shape_out(out, k.shape)


def log_bessel_i(n, v) -> BesselResult:
    """Natural log of the modified Bessel function ``I_n(v)``.

    Parameters
    ----------
    n : int or array_like
        Nonnegative integer order.
    v : float or array_like
        Nonnegative argument; ``v = 0`` returns the limit (0 for ``n = 0``,
        ``-inf`` otherwise).

    Returns
    -------
    BesselResult
    """
    n = _as_counts(n, "n")
    v = _as_rate(v, "v", allow_zero=True)
    n, v = np.broadcast_arrays(n, v)
    vals, terms, ok = kernels.log_ive(n.ravel(), v.ravel())
    vals = vals + v.ravel()
    return BesselResult(
        log_value=_shape_out(vals, n.shape),
        converged=_shape_out(ok, n.shape),
        terms_used=_shape_out(terms, n.shape),
    )


def _warn_unconverged(ok, z, v):
    if not np.all(ok):
        i = int(np.flatnonzero(~ok)[0])
        warnings.warn(
            f"Bessel evaluation did not converge (order {abs(int(z[i]))}, argument {v[i]!r})",
            BesselConvergenceWarning,
            stacklevel=3,
        )


def skellam_logpmf_and_grad(z, lam1, lam2):
    """Skellam log-pmf with derivatives in ``log lam1`` and ``log lam2``.

    Returns
    -------
    logpmf, dlog1, dlog2 : ndarray
        Flat arrays matching the broadcast input.
    """
    z = _as_counts(z, "z", signed=True)
    lam1 = _as_rate(lam1, "lam1")
    lam2 = _as_rate(lam2, "lam2")
    z, lam1, lam2 = (a.ravel() for a in np.broadcast_arrays(z, lam1, lam2))
    logpmf, d1, d2, ok = kernels.skellam_logpmf_grad(z, lam1, lam2)
    _warn_unconverged(ok, z, 2.0 * np.sqrt(lam1 * lam2))
    return logpmf, d1, d2


def log_skellam_pmf(z, lam1, lam2):
    """Log pmf of the difference of two independent Poisson variables.

    ``log f = -(lam1 + lam2) + (z/2) log(lam1/lam2) + log I_|z|(2 sqrt(lam1 lam2))``.
    The ``-(lam1 + lam2) + log I`` part is combined as
    ``-(sqrt(lam1) - sqrt(lam2))**2 + log(I e^-v)`` to avoid cancellation.
    """
    z_arr = _as_counts(z, "z", signed=True)
    l1 = _as_rate(lam1, "lam1")
    l2 = _as_rate(lam2, "lam2")
    shape = np.broadcast_shapes(z_arr.shape, l1.shape, l2.shape)
    logpmf, _, _ = skellam_logpmf_and_grad(z_arr, l1, l2)
    return _shape_out(logpmf, shape)


def _bp_prepare(x, y, lam1, lam2, lam3):
    x = _as_counts(x, "x")
    y = _as_counts(y, "y")
    lam1 = _as_rate(lam1, "lam1")
    lam2 = _as_rate(lam2, "lam2")
    lam3 = _as_rate(lam3, "lam3", allow_zero=True)
    arrs = np.broadcast_arrays(x, y, lam1, lam2, lam3)
    return arrs[0].shape, [a.ravel() for a in arrs]


def _log_theta(lam1, lam2, lam3):
    with np.errstate(divide="ignore"):
        return np.log(lam3) - np.log(lam1) - np.log(lam2)


def log_bivariate_poisson_pmf(x, y, lam1, lam2, lam3):
    """Log pmf of the bivariate Poisson law ``(X1 + X3, X2 + X3)``.

    With ``theta = lam3 / (lam1 lam2)`` the pmf is
    ``Pois(x; lam1) Pois(y; lam2) exp(-lam3) sum_k C(x,k) C(y,k) k! theta**k``.
    At ``lam3 = 0`` the result is exactly the product of the two Poisson
    marginals.
    """
    shape, (x, y, lam1, lam2, lam3) = _bp_prepare(x, y, lam1, lam2, lam3)
    out = kernels.log_poisson(x, lam1) + kernels.log_poisson(y, lam2)
    pos = lam3 > 0
    if np.any(pos):
        inner, _ = kernels.bp_inner(x[pos], y[pos], _log_theta(lam1[pos], lam2[pos], lam3[pos]))
        out[pos] += inner - lam3[pos]
    return _shape_out(out, shape)


def bp_conditional_mean_x3(x, y, lam1, lam2, lam3):
    """Posterior mean ``E[X3 | X = x, Y = y]`` of the common component.

    Zero when ``min(x, y) = 0`` or ``lam3 = 0``; otherwise in ``[0, min(x, y)]``.
    """
    shape, (x, y, lam1, lam2, lam3) = _bp_prepare(x, y, lam1, lam2, lam3)
    out = np.zeros(x.shape)
    pos = lam3 > 0
    if np.any(pos):
        _, mean = kernels.bp_inner(x[pos], y[pos], _log_theta(lam1[pos], lam2[pos], lam3[pos]))
        out[pos] = mean
    return _shape_out(out, shape)


# ---------------------------------------------------------------------------
# Sampling

#: Identifies the Poisson sampling algorithm; bump when the draw sequence changes.
SAMPLER_VERSION = "mortgap-poisson/1 (inversion below 30, PTRS above; PCG64)"

_INVERSION_MAX = 30.0


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def _poisson_inversion(lam, rng):
    # sequential search on the cdf; lam < 30 keeps the loop short
    u = rng.random(lam.shape)
    k = np.zeros(lam.shape, dtype=np.int64)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    while active.any():
        k = k + active
        p = np.where(active, p * lam / np.maximum(k, 1), p)
        cdf = np.where(active, cdf + p, cdf)
        # p underflows only far in the tail; stop there
        active &= (u > cdf) & (p > 0)
    return k


def _poisson_ptrs(lam, rng):
    # transformed rejection with squeeze (Hormann 1993)
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    out = np.empty(lam.shape, dtype=np.int64)
    todo = np.arange(lam.size)
    while todo.size:
        u = rng.random(todo.size) - 0.5
        v = rng.random(todo.size)
        us = 0.5 - np.abs(u)
        aa, bb, ll = a[todo], b[todo], lam[todo]
        k = np.floor((2.0 * aa / us + bb) * u + ll + 0.43)
        accept = (us >= 0.07) & (v <= vr[todo])
        maybe = ~accept & (k >= 0) & ~((us < 0.013) & (v > us))
        if np.any(maybe):
            km = k[maybe]
            lhs = np.log(v[maybe]) + np.log(invalpha[todo][maybe]) - np.log(aa[maybe] / (us[maybe] ** 2) + bb[maybe])
            rhs = -ll[maybe] + km * loglam[todo][maybe] - gammaln(km + 1.0)
            accept[np.flatnonzero(maybe)[lhs <= rhs]] = True
        out[todo[accept]] = k[accept].astype(np.int64)
        todo = todo[~accept]
    return out


def sample_poisson(lam, rng=None):
    """Draw Poisson variates with one draw per element of ``lam``.

    Parameters
    ----------
    lam : array_like
        Nonnegative means.
    rng : numpy.random.Generator or int, optional
        Generator, or a seed for a PCG64 generator.

    Notes
    -----
    The algorithm is fixed (see ``SAMPLER_VERSION``) and only consumes
    uniforms from ``rng``, so draws are reproducible across NumPy releases.
    """
    lam = _as_rate(lam, "lam", allow_zero=True)
    rng = _rng(rng)
    flat = lam.ravel()
    out = np.zeros(flat.shape, dtype=np.int64)
    small = (flat > 0) & (flat < _INVERSION_MAX)
    large = flat >= _INVERSION_MAX
    if small.any():
        out[small] = _poisson_inversion(flat[small], rng)
    if large.any():
        out[large] = _poisson_ptrs(flat[large], rng)
    return _shape_out(out, lam.shape)


def sample_skellam(lam1, lam2, rng=None):
    """Draw ``X1 - X2`` with independent ``X1 ~ Pois(lam1)``, ``X2 ~ Pois(lam2)``."""
    l1, l2 = np.broadcast_arrays(_as_rate(lam1, "lam1"), _as_rate(lam2, "lam2"))
    rng = _rng(rng)
    return np.asarray(sample_poisson(l1, rng)) - np.asarray(sample_poisson(l2, rng))


def sample_bivariate_poisson(lam1, lam2, lam3, rng=None):
    """Draw ``(X1 + X3, X2 + X3)`` from three independent Poisson variables.

    Returns
    -------
    x, y : ndarray of int64
    """
    l1, l2, l3 = np.broadcast_arrays(
        _as_rate(lam1, "lam1"), _as_rate(lam2, "lam2"), _as_rate(lam3, "lam3", allow_zero=True)
    )
    rng = _rng(rng)
    x1 = np.asarray(sample_poisson(l1, rng))
    x2 = np.asarray(sample_poisson(l2, rng))
    x3 = np.asarray(sample_poisson(l3, rng))
    return x1 + x3, x2 + x3
