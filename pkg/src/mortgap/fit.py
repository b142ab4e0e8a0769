"""Maximum-likelihood fitting of the three age-period count models.

* Double Poisson: two independent log-link Poisson models, solved by
  Newton's method with an index-accumulated Hessian.
* Bivariate Poisson: common-shock model with a constant common rate,
  solved by EM (optionally SQUAREM-accelerated) with an exact M-step.
* Skellam: model for the signed gap, solved by BFGS on the negative
  log-likelihood with an analytic gradient.

Parameter vectors follow :mod:`mortgap.design`: one block per series, with
the bivariate Poisson log common rate as a trailing extra.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .design import (
    AgePeriodParams,
    IntensityOverflowError,
    MAX_LOG_INTENSITY,
    accumulate_gradient,
    block_size,
    n_effective,
    pack,
    predictor_surface,
    unpack,
)
from .panel import GapPanel, MortalityPanel, to_gap

__all__ = [
    "Model",
    "OptimSettings",
    "FitResult",
    "BoundaryWarning",
    "EMMonotonicityError",
    "SkellamNumericError",
    "FLAG_DEGENERATE",
    "FLAG_WEAK",
    "FLAG_BOUNDARY",
    "rowcol_poisson_mle",
    "fit_double_poisson",
    "fit_bivariate_poisson",
    "fit_skellam",
    "fit_model",
    "bp_boundary_score",
    "negative_log_likelihood",
    "gradient",
]

FLAG_DEGENERATE = "degenerated to double Poisson"
FLAG_WEAK = "weakly identified"
FLAG_BOUNDARY = "boundary parameter capped"


class Model(str, enum.Enum):
    """Model families. Values double as short command-line names."""

    DOUBLE_POISSON = "dp"
    BIVARIATE_POISSON = "bp"
    SKELLAM = "skellam"

    @property
    def title(self) -> str:
        return {"dp": "Double Poisson", "bp": "Bivariate Poisson", "skellam": "Skellam"}[self.value]

    @property
    def block_names(self) -> tuple[str, str]:
        return ("C", "D") if self is Model.SKELLAM else ("A", "B")

    @property
    def n_extras(self) -> int:
        return 1 if self is Model.BIVARIATE_POISSON else 0


class BoundaryWarning(RuntimeWarning):
    """An MLE lies on the boundary and was capped at a finite value."""


class EMMonotonicityError(RuntimeError):
    """The EM log-likelihood decreased beyond rounding tolerance."""


class SkellamNumericError(FloatingPointError):
    """The Skellam objective or gradient became non-finite at a cell."""


@dataclass(frozen=True)
class OptimSettings:
    """Tolerances and limits for the three estimators.

    Attributes
    ----------
    newton_max_iter, newton_step_tol
        Newton iterations for the Poisson blocks stop once every parameter
        moves by less than ``newton_step_tol``.
    effect_floor
        Log-scale offset, below the smallest identified effect, assigned to
        an age or year whose counts are all zero.
    em_rel_tolerance, em_max_iter
        EM stops once the relative log-likelihood gain of an iteration drops
        below ``em_rel_tolerance``.
    em_param_tolerance
        Additionally require the largest change of a log-scale parameter
        under one plain EM map to be below this value (``inf`` disables the
        check).
    em_monotone_atol, em_monotone_rtol
        A log-likelihood drop larger than ``atol + rtol * |loglik|`` raises
        :class:`EMMonotonicityError`.
    squarem
        Use squared-extrapolation acceleration of the EM map.
    em_boundary_rtol
        EM also stops once the common rate falls below this fraction of the
        mean of ``min(D^A, D^B)``; the fit is then compared with the double
        Poisson boundary solution.
    bp_lambda3_floor
        Floor for the initial common rate.
    skellam_em_iter, skellam_em_rtol
        Latent-count EM iterations run before BFGS for the Skellam model;
        the warm start ends early once the relative gain drops below
        ``skellam_em_rtol``.
    bfgs_gtol, bfgs_max_iter
        BFGS stops when the sup-norm of the gradient is below ``bfgs_gtol``.
    bfgs_ftol, bfgs_stall
        BFGS also stops once the objective has changed by less than
        ``bfgs_ftol * (1 + |f|)`` over ``bfgs_stall`` consecutive iterations,
        which is where rounding in the gradient takes over.
    armijo_c1, wolfe_c2, backtrack, max_line_search
        Line-search constants.
    """

    newton_max_iter: int = 200
    newton_step_tol: float = 1e-10
    effect_floor: float = -30.0
    em_rel_tolerance: float = 1e-8
    em_max_iter: int = 5000
    em_param_tolerance: float = 1e-6
    em_monotone_atol: float = 1e-10
    em_monotone_rtol: float = 1e-14
    squarem: bool = True
    em_boundary_rtol: float = 1e-10
    bp_lambda3_floor: float = 1e-4
    skellam_em_iter: int = 50
    skellam_em_rtol: float = 1e-9
    bfgs_gtol: float = 1e-6
    bfgs_max_iter: int = 2000
    bfgs_ftol: float = 1e-15
    bfgs_stall: int = 10
    armijo_c1: float = 1e-4
    wolfe_c2: float = 0.9
    backtrack: float = 0.5
    max_line_search: int = 60


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one model fit.

    ``intensity_a`` and ``intensity_b`` are the fitted block intensities
    (``lambda^A``, ``lambda^B``; for Skellam ``lambda^C``, ``lambda^D``) and
    ``fitted_gap`` is their difference. For the bivariate Poisson model the
    blocks are the non-shared components, so the marginal means are
    ``intensity + lambda3``.

    ``log_lik`` includes every data-only constant (the ``log D!`` terms).
    The Skellam likelihood is over the gaps and the Poisson ones over the
    count pairs, so information criteria compare across different sample
    spaces.
    """

    model: Model
    ages: tuple
    years: tuple
    labels: tuple
    theta: np.ndarray
    blocks: tuple
    lambda3: float | None
    intensity_a: np.ndarray
    intensity_b: np.ndarray
    fitted_gap: np.ndarray
    log_lik: float
    n_params: int
    n_obs: int
    converged: bool
    iterations: int
    trace: tuple = ()
    grad_norm: float = float("nan")
    flags: tuple = ()
    message: str = ""

    @property
    def block_names(self) -> tuple[str, str]:
        return self.model.block_names

    @property
    def mean_a(self) -> np.ndarray:
        """Fitted marginal mean of the first series."""
        return self.intensity_a + (self.lambda3 or 0.0)

    @property
    def mean_b(self) -> np.ndarray:
        return self.intensity_b + (self.lambda3 or 0.0)


# ---------------------------------------------------------------------------
# Shared helpers


def _surface(block: AgePeriodParams) -> np.ndarray:
    eta = predictor_surface(block)
    over = eta > MAX_LOG_INTENSITY
    if np.any(over):
        x, t = np.argwhere(over)[0]
        raise IntensityOverflowError(f"linear predictor {eta[x, t]:.6g} at cell (age {x}, year {t}) overflows")
    return np.exp(eta)


def _fsum(a) -> float:
    return math.fsum(np.asarray(a, dtype=float).ravel())


def _capped_logs(v, floor):
    # log of nonnegative totals; zeros sit `floor` below the smallest positive log
    out = np.empty(v.shape)
    pos = v > 0
    out[pos] = np.log(v[pos])
    if not np.all(pos):
        out[~pos] = (out[pos].min() if np.any(pos) else 0.0) + floor
    return out


def _block_from_logs(log_rows, log_cols, log_total):
    # log lambda[x, t] = log_rows[x] + log_cols[t] - log_total
    return AgePeriodParams(
        log_rows[0] + log_cols[0] - log_total,
        log_rows[1:] - log_rows[0],
        log_cols[1:] - log_cols[0],
    )


def rowcol_poisson_mle(responses, effect_floor: float = -30.0) -> AgePeriodParams:
    """Closed-form Poisson MLE of an additive age-period log-linear model.

    For nonnegative (possibly fractional) responses ``R`` the score
    equations equate fitted and observed row and column totals, which the
    rank-one surface ``r_x c_t / N`` satisfies exactly.

    Rows or columns with zero total get a finite effect ``effect_floor``
    below the smallest identified one.
    """
    R = np.asarray(responses, dtype=float)
    if np.any(R < 0):
        raise ValueError("Poisson responses must be nonnegative")
    total = R.sum()
    if total <= 0:
        return AgePeriodParams.zeros(*R.shape, intercept=effect_floor)
    return _block_from_logs(_capped_logs(R.sum(axis=1), effect_floor), _capped_logs(R.sum(axis=0), effect_floor), np.log(total))


def _block_hessian(lam):
    # negative Hessian of sum(R eta - lambda) over one block, assembled by index
    A, T = lam.shape
    p = block_size(A, T)
    rs, cs = lam.sum(axis=1), lam.sum(axis=0)
    H = np.zeros((p, p))
    H[0, 0] = lam.sum()
    H[0, 1:A] = H[1:A, 0] = rs[1:]
    H[0, A:] = H[A:, 0] = cs[1:]
    H[1:A, 1:A] = np.diag(rs[1:])
    H[A:, A:] = np.diag(cs[1:])
    H[1:A, A:] = lam[1:, 1:]
    H[A:, 1:A] = lam[1:, 1:].T
    return H


def _newton_poisson(R, settings: OptimSettings):
    """Newton's method for the additive log-linear Poisson model on R > 0 rows/cols."""
    A, T = R.shape
    theta = np.zeros(block_size(A, T))
    theta[0] = np.log(R.mean())

    def objective(th):
        blk = unpack(th, A, T)[0][0]
        eta = predictor_surface(blk)
        if np.any(eta > MAX_LOG_INTENSITY):
            return -np.inf, None
        lam = np.exp(eta)
        return _fsum(R * eta - lam), lam

    ll, lam = objective(theta)
    for it in range(1, settings.newton_max_iter + 1):
        g = accumulate_gradient(R - lam)
        step = np.linalg.solve(_block_hessian(lam), g)
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            ll_new, lam_new = objective(cand)
            # concave objective: accept any non-decrease up to rounding
            if ll_new >= ll - 1e-13 * abs(ll):
                break
            t *= 0.5
        else:
            return theta, it, False
        theta, ll, lam = cand, ll_new, lam_new
        if np.max(np.abs(t * step)) < settings.newton_step_tol:
            return theta, it, True
    return theta, settings.newton_max_iter, False


def _fit_poisson_block(D, settings: OptimSettings):
    """Newton fit of one series; zero rows/columns are capped. Returns (block, iters, converged, capped)."""
    D = np.asarray(D, dtype=float)
    A, T = D.shape
    rows = D.sum(axis=1) > 0
    cols = D.sum(axis=0) > 0
    if not rows.any():
        return AgePeriodParams.zeros(A, T, intercept=settings.effect_floor), 0, True, True
    sub = D[np.ix_(rows, cols)]
    theta, iters, ok = _newton_poisson(sub, settings)
    ra, rb = np.count_nonzero(rows), np.count_nonzero(cols)
    blk = unpack(theta, ra, rb)[0][0]
    a = np.empty(A)
    b = np.empty(T)
    a[rows] = blk.full_age()
    b[cols] = blk.full_period()
    if not rows.all():
        a[~rows] = a[rows].min() + settings.effect_floor
    if not cols.all():
        b[~cols] = b[cols].min() + settings.effect_floor
    block = AgePeriodParams(blk.intercept + a[0] + b[0] - a[rows][0] - b[cols][0], a[1:] - a[0], b[1:] - b[0])
    return block, iters, ok, not (rows.all() and cols.all())


def _poisson_loglik(D, lam) -> float:
    D = np.asarray(D, dtype=np.int64).ravel()
    return _fsum(kernels.log_poisson(D, np.asarray(lam, dtype=float).ravel()))


_TINY = np.finfo(float).tiny


def _bp_cells(x, y, lam1, lam2, lam3):
    """Per-cell log pmf and E[X3 | x, y] for the bivariate Poisson model."""
    x = np.asarray(x, dtype=np.int64).ravel()
    y = np.asarray(y, dtype=np.int64).ravel()
    # rates that underflowed to 0 (e.g. an extrapolated EM step) stay positive
    l1 = np.maximum(np.asarray(lam1, dtype=float).ravel(), _TINY)
    l2 = np.maximum(np.asarray(lam2, dtype=float).ravel(), _TINY)
    base = kernels.log_poisson(x, l1) + kernels.log_poisson(y, l2)
    if lam3 <= 0:
        return base, np.zeros(x.shape)
    log_theta = np.log(lam3) - np.log(l1) - np.log(l2)
    inner, s = kernels.bp_inner(x, y, log_theta)
    return base - lam3 + inner, s


# ---------------------------------------------------------------------------
# Double Poisson


def _result(model, panel, blocks, lam3, log_lik, converged, iterations, **kw) -> FitResult:
    A, T = len(panel.ages), len(panel.years)
    la, lb = _surface(blocks[0]), _surface(blocks[1])
    extras = () if model is not Model.BIVARIATE_POISSON else (np.log(lam3) if lam3 > 0 else -np.inf,)
    theta = pack(blocks, extras)
    theta.setflags(write=False)
    for arr in (la, lb):
        arr.setflags(write=False)
    gap = la - lb
    gap.setflags(write=False)
    labels = getattr(panel, "labels", model.block_names)
    return FitResult(
        model=model,
        ages=tuple(panel.ages),
        years=tuple(panel.years),
        labels=tuple(labels),
        theta=theta,
        blocks=tuple(blocks),
        lambda3=lam3,
        intensity_a=la,
        intensity_b=lb,
        fitted_gap=gap,
        log_lik=float(log_lik),
        n_params=n_effective(A, T, 2, model.n_extras),
        n_obs=A * T,
        converged=bool(converged),
        iterations=int(iterations),
        **kw,
    )


def fit_double_poisson(panel: MortalityPanel, settings: OptimSettings | None = None) -> FitResult:
    """Fit two independent age-period Poisson models.

    The log-likelihood includes the ``-log D!`` terms. An age or year with
    all-zero counts in a series has an unbounded MLE; its effect is capped
    (see ``OptimSettings.effect_floor``) and a :class:`BoundaryWarning`
    is issued.
    """
    settings = settings or OptimSettings()
    fits = [_fit_poisson_block(D, settings) for D in (panel.counts_a, panel.counts_b)]
    blocks = [f[0] for f in fits]
    flags = []
    for name, f in zip(panel.labels, fits):
        if f[3]:
            warnings.warn(f"series {name!r} has an all-zero age or year; its effect was capped", BoundaryWarning, stacklevel=2)
            flags.append(f"{FLAG_BOUNDARY} ({name})")
    la, lb = _surface(blocks[0]), _surface(blocks[1])
    ll = _poisson_loglik(panel.counts_a, la) + _poisson_loglik(panel.counts_b, lb)
    res = _result(
        Model.DOUBLE_POISSON,
        panel,
        blocks,
        None,
        ll,
        all(f[2] for f in fits),
        max(f[1] for f in fits),
        flags=tuple(flags),
        trace=(ll,),
    )
    theta = res.theta
    g = gradient(Model.DOUBLE_POISSON, panel, theta)
    return replace(res, grad_norm=float(np.max(np.abs(g))))


# ---------------------------------------------------------------------------
# Bivariate Poisson


def bp_boundary_score(panel: MortalityPanel, mean_a, mean_b) -> float:
    """Derivative of the bivariate Poisson log-likelihood in ``lambda3`` at 0.

    Evaluated with the blocks held at ``mean_a`` and ``mean_b``; equals
    ``sum(x y / (mean_a mean_b) - 1)``. A nonpositive value means the
    double Poisson fit is a boundary (Kuhn-Tucker) point for ``lambda3``.
    """
    x = panel.counts_a.astype(float)
    y = panel.counts_b.astype(float)
    return _fsum(x * y / (mean_a * mean_b) - 1.0)


class _EMState:
    """EM map and log-likelihood on the flat log-scale parameter vector."""

    def __init__(self, panel: MortalityPanel, settings: OptimSettings):
        self.x = panel.counts_a
        self.y = panel.counts_b
        self.A, self.T = panel.shape
        self.settings = settings
        self.n_cells = self.A * self.T
        self.boundary = settings.em_boundary_rtol * float(np.mean(np.minimum(self.x, self.y)))

    def split(self, theta):
        blocks, extra = unpack(theta, self.A, self.T, 2, 1)
        if extra[0] > MAX_LOG_INTENSITY:
            raise IntensityOverflowError(f"log common rate {extra[0]:.6g} exceeds {MAX_LOG_INTENSITY}")
        return blocks, float(np.exp(extra[0]))

    def surfaces(self, theta):
        blocks, lam3 = self.split(theta)
        return _surface(blocks[0]), _surface(blocks[1]), lam3

    def loglik(self, theta) -> float:
        try:
            l1, l2, lam3 = self.surfaces(theta)
        except IntensityOverflowError:
            return -np.inf
        cells, _ = _bp_cells(self.x, self.y, l1, l2, lam3)
        return _fsum(cells)

    def step(self, theta):
        l1, l2, lam3 = self.surfaces(theta)
        _, s = _bp_cells(self.x, self.y, l1, l2, lam3)
        s = s.reshape(self.A, self.T)
        floor = self.settings.effect_floor
        b1 = rowcol_poisson_mle(np.maximum(self.x - s, 0.0), floor)
        b2 = rowcol_poisson_mle(np.maximum(self.y - s, 0.0), floor)
        mean_s = _fsum(s) / self.n_cells
        extra = np.log(mean_s) if mean_s > 0 else -np.inf
        return pack([b1, b2], [extra])


def _run_em(state: _EMState, theta, settings: OptimSettings):
    ll = state.loglik(theta)
    trace = [ll]
    converged = False
    it = 0

    def check(new_ll, old_ll):
        if new_ll < old_ll - (settings.em_monotone_atol + settings.em_monotone_rtol * abs(old_ll)):
            raise EMMonotonicityError(f"EM log-likelihood fell from {old_ll!r} to {new_ll!r} at iteration {it}")

    for it in range(1, settings.em_max_iter + 1):
        t1 = state.step(theta)
        if not np.isfinite(t1[-1]):
            theta, ll = t1, state.loglik(t1)
            trace.append(ll)
            converged = True
            break
        t2 = state.step(t1)
        if not np.isfinite(t2[-1]):
            theta, ll = t2, state.loglik(t2)
            trace.append(ll)
            converged = True
            break
        ll2 = state.loglik(t2)
        new, new_ll = t2, ll2
        if settings.squarem:
            r = t1 - theta
            v = t2 - 2.0 * t1 + theta
            nv = np.linalg.norm(v)
            alpha = min(-np.linalg.norm(r) / nv, -1.0) if nv > 0 else -1.0
            # overshooting extrapolations are pulled back towards alpha = -1,
            # where the scheme reduces to two plain EM steps
            while alpha < -1.0:
                t3 = theta - 2.0 * alpha * r + alpha * alpha * v
                try:
                    t4 = state.step(t3)
                    ll4 = state.loglik(t4) if np.isfinite(t4[-1]) else -np.inf
                except IntensityOverflowError:
                    ll4 = -np.inf
                if ll4 >= ll2:
                    new, new_ll = t4, ll4
                    break
                alpha = 0.5 * (alpha - 1.0) if alpha < -1.5 else -1.0
        check(new_ll, ll)
        gain = new_ll - ll
        # fixed-point residual of the plain EM map; the accepted step may be
        # an extrapolation that wanders along a flat ridge at rounding level
        move = np.max(np.abs(t1 - theta))
        theta, ll = new, new_ll
        trace.append(ll)
        if abs(gain) <= settings.em_rel_tolerance * abs(ll) and move <= settings.em_param_tolerance:
            converged = True
            break
        if np.exp(theta[-1]) < state.boundary:
            converged = True
            break
    return theta, ll, tuple(trace), converged, it


def fit_bivariate_poisson(panel: MortalityPanel, settings: OptimSettings | None = None) -> FitResult:
    """Fit the bivariate Poisson model with a constant common rate by EM.

    The E-step computes ``s = E[X3 | D^A, D^B]`` per cell. The M-step sets
    ``lambda3 = mean(s)`` and refits each block on ``D - s``; for an
    additive log-linear block that Poisson fit has a closed form, so each
    M-step is exact.

    If the EM solution does not improve on the double Poisson fit (the
    common rate is driven to its boundary), the result is the double
    Poisson fit with ``lambda3 = 0`` and the ``"degenerated to double
    Poisson"`` flag.

    Raises
    ------
    EMMonotonicityError
        If an iteration lowers the log-likelihood beyond rounding tolerance.
    """
    settings = settings or OptimSettings()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        dp = fit_double_poisson(panel, settings)
    la, lb = dp.intensity_a, dp.intensity_b
    score = bp_boundary_score(panel, la, lb)

    # warm start: scaled residual correlation times the smaller marginal
    ra = (panel.counts_a - la).ravel()
    rb = (panel.counts_b - lb).ravel()
    rho = 0.0
    if ra.size > 1 and ra.std() > 0 and rb.std() > 0:
        rho = float(np.corrcoef(ra, rb)[0, 1])
    lam3 = max(settings.bp_lambda3_floor, 0.9 * float(np.min(np.minimum(la, lb))) * rho)
    floor = settings.effect_floor
    b1 = rowcol_poisson_mle(np.maximum(panel.counts_a - lam3, 0.0), floor)
    b2 = rowcol_poisson_mle(np.maximum(panel.counts_b - lam3, 0.0), floor)
    theta0 = pack([b1, b2], [np.log(lam3)])

    state = _EMState(panel, settings)
    theta, ll, trace, converged, iters = _run_em(state, theta0, settings)
    blocks, extra = unpack(theta, *panel.shape, 2, 1)
    lam3_hat = float(np.exp(extra[0]))

    info = f"boundary score {score:.6g}"
    if not (ll > dp.log_lik) or lam3_hat == 0.0:
        res = _result(
            Model.BIVARIATE_POISSON,
            panel,
            list(dp.blocks),
            0.0,
            dp.log_lik,
            dp.converged,
            iters,
            trace=trace,
            flags=dp.flags + (FLAG_DEGENERATE,),
            message=f"{info}; EM log-likelihood {ll!r} did not exceed double Poisson {dp.log_lik!r}",
        )
    else:
        res = _result(
            Model.BIVARIATE_POISSON,
            panel,
            blocks,
            lam3_hat,
            ll,
            converged,
            iters,
            trace=trace,
            flags=dp.flags,
            message=info if converged else f"{info}; EM stopped after {iters} iterations",
        )
    g = gradient(Model.BIVARIATE_POISSON, panel, res.theta)
    return replace(res, grad_norm=float(np.max(np.abs(g[np.isfinite(g)]))))


# ---------------------------------------------------------------------------
# Skellam


def _skellam_terms(gap: GapPanel, theta, with_grad=True):
    A, T = gap.shape
    blocks, _ = unpack(theta, A, T, 2)
    lc, ld = _surface(blocks[0]), _surface(blocks[1])
    z = gap.gaps.ravel()
    logpmf, d1, d2, ok = kernels.skellam_logpmf_grad(z, lc.ravel(), ld.ravel())
    bad = ~np.isfinite(logpmf) | ~np.isfinite(d1) | ~np.isfinite(d2)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        x, t = divmod(i, T)
        v = 2.0 * math.sqrt(lc.ravel()[i]) * math.sqrt(ld.ravel()[i])
        raise SkellamNumericError(
            f"non-finite Skellam term at age {gap.ages[x]!r}, year {gap.years[t]} (gap {z[i]}, Bessel argument v={v!r})"
        )
    if not with_grad:
        return logpmf, None
    grad = np.concatenate([accumulate_gradient(d1.reshape(A, T)), accumulate_gradient(d2.reshape(A, T))])
    return logpmf, grad


def _skellam_fg(gap: GapPanel, theta):
    logpmf, grad = _skellam_terms(gap, theta)
    return -_fsum(logpmf), -grad


def _line_search(fg, x, f, g, p, settings: OptimSettings):
    """Backtracking line search with an approximate-Wolfe fallback.

    Sufficient decrease is tested on ``f`` first; when that test is below
    the rounding level of ``f`` the step is instead accepted on the
    derivative conditions of the approximate Wolfe rule.
    """
    dphi0 = float(g @ p)
    eps_f = 1e-12 * (1.0 + abs(f))
    t = 1.0
    for _ in range(settings.max_line_search):
        xn = x + t * p
        try:
            fn, gn = fg(xn)
        except (IntensityOverflowError, SkellamNumericError, FloatingPointError):
            t *= settings.backtrack
            continue
        if np.isfinite(fn):
            if fn <= f + settings.armijo_c1 * t * dphi0:
                return t, xn, fn, gn
            dphi = float(gn @ p)
            if fn <= f + eps_f and settings.wolfe_c2 * dphi0 <= dphi <= (2 * settings.armijo_c1 - 1) * dphi0:
                return t, xn, fn, gn
        t *= settings.backtrack
    return None


def _bfgs(fg, x0, settings: OptimSettings, h0=None):
    """BFGS on the inverse Hessian.

    ``h0(x)`` supplies the starting inverse-Hessian approximation; it is
    also used to restart when the update stops producing descent. Without
    it the identity, rescaled after the first step, is used.
    """
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    n = x.size

    def fresh(at):
        if h0 is not None:
            return h0(at), True
        return np.eye(n), False

    H, scaled = fresh(x)
    trace = [-f]
    message = "maximum iterations reached"
    converged = False
    it = 0
    for it in range(settings.bfgs_max_iter + 1):
        if np.max(np.abs(g)) < settings.bfgs_gtol:
            converged = True
            message = "gradient tolerance reached"
            break
        if it == settings.bfgs_max_iter:
            break
        p = -H @ g
        if g @ p >= 0:
            H, scaled = fresh(x)
            p = -H @ g
        found = _line_search(fg, x, f, g, p, settings)
        if found is None:
            # curvature model is stale: restart, then fall back to steepest descent
            H, scaled = fresh(x)
            found = _line_search(fg, x, f, g, -H @ g, settings)
            if found is None:
                H, scaled = np.eye(n), False
                found = _line_search(fg, x, f, g, -g, settings)
        if found is None:
            message = "line search failed"
            break
        t, xn, fn, gn = found
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        if sy > 0:
            if not scaled:
                H = np.eye(n) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        x, f, g = xn, fn, gn
        trace.append(-f)
        k = settings.bfgs_stall
        if len(trace) > k and abs(trace[-1] - trace[-1 - k]) <= settings.bfgs_ftol * (1.0 + abs(f)):
            converged = True
            message = "objective change below rounding level"
            break
    return x, f, g, converged, it, tuple(trace), message


def _skellam_inverse_fisher(gap: GapPanel, theta) -> np.ndarray:
    """Inverse of a normal-approximation Fisher information for the Skellam blocks.

    Treats each gap as having mean ``lc - ld`` and variance ``lc + ld``;
    used only to start and restart BFGS.
    """
    A, T = gap.shape
    blocks, _ = unpack(theta, A, T, 2)
    lc, ld = _surface(blocks[0]), _surface(blocks[1])
    v = lc + ld
    half = 0.5 / (v * v)
    w_cc = lc * lc * (1.0 / v + half)
    w_dd = ld * ld * (1.0 / v + half)
    w_cd = lc * ld * (half - 1.0 / v)
    hc, hd, hx = _block_hessian(w_cc), _block_hessian(w_dd), _block_hessian(w_cd)
    F = np.block([[hc, hx], [hx.T, hd]])
    ridge = 1e-12 * np.trace(F) / F.shape[0]
    try:
        return np.linalg.inv(F + ridge * np.eye(F.shape[0]))
    except np.linalg.LinAlgError:
        return np.eye(F.shape[0])


def _skellam_init(gap: GapPanel) -> np.ndarray:
    A, T = gap.shape
    G = gap.gaps.astype(float)
    # a shared floor keeps the minority block away from zero, where its
    # score vanishes with its intensity and neither EM nor BFGS recovers it
    floor = 0.5 * np.mean(np.abs(G)) + 0.5
    mc = np.log(np.mean(np.maximum(G, 0.0)) + floor)
    md = np.log(np.mean(np.maximum(-G, 0.0)) + floor)
    return pack([AgePeriodParams.zeros(A, T, mc), AgePeriodParams.zeros(A, T, md)])


def _skellam_em(gap: GapPanel, theta, settings: OptimSettings):
    """Warm start by EM on the latent Poisson pair ``G = X - Y``.

    The E-step conditional means follow from the score identity
    ``E[X | G] = lambda^C + d log p / d log lambda^C``; the M-step is the
    closed-form Poisson row-column fit of each block. The map is monotone,
    and it fits the mean surface before the variance, which keeps BFGS out
    of the region where both intensities inflate to absorb a bad mean.
    """
    A, T = gap.shape
    prev = None
    for _ in range(settings.skellam_em_iter):
        blocks, _ = unpack(theta, A, T, 2)
        lc, ld = _surface(blocks[0]), _surface(blocks[1])
        logpmf, d1, d2, _ = kernels.skellam_logpmf_grad(gap.gaps.ravel(), lc.ravel(), ld.ravel())
        ll = _fsum(logpmf)
        if not (np.isfinite(ll) and np.all(np.isfinite(d1)) and np.all(np.isfinite(d2))):
            break
        if prev is not None and ll - prev <= settings.skellam_em_rtol * abs(ll):
            break
        prev = ll
        ex = np.maximum(lc + d1.reshape(A, T), 0.0)
        ey = np.maximum(ld + d2.reshape(A, T), 0.0)
        theta = pack([rowcol_poisson_mle(ex, settings.effect_floor), rowcol_poisson_mle(ey, settings.effect_floor)])
    return theta


def fit_skellam(gap: GapPanel, settings: OptimSettings | None = None, init=None) -> FitResult:
    """Fit the age-period Skellam model to a gap panel by BFGS.

    Parameters
    ----------
    gap : GapPanel
    settings : OptimSettings, optional
    init : array_like, optional
        Starting parameter vector ``[block C, block D]``. The default sets
        both intercepts from the positive and negative parts of the gaps
        and all effects to zero, then refines that start with a few
        latent-count EM iterations.

    Notes
    -----
    When every gap is zero the likelihood is symmetric in the two blocks;
    the default start is symmetric, the optimizer stays on the
    ``lambda^C = lambda^D`` ridge and the result is flagged
    ``"weakly identified"``.
    """
    settings = settings or OptimSettings()
    if isinstance(gap, MortalityPanel):
        gap = to_gap(gap)
    if init is None:
        x0 = _skellam_em(gap, _skellam_init(gap), settings)
    else:
        x0 = np.asarray(init, dtype=float)
    x, f, g, converged, iters, trace, message = _bfgs(
        lambda th: _skellam_fg(gap, th), x0, settings, h0=lambda th: _skellam_inverse_fisher(gap, th)
    )
    flags = (FLAG_WEAK,) if not np.any(gap.gaps) else ()
    blocks, _ = unpack(x, *gap.shape, 2)
    return _result(
        Model.SKELLAM,
        gap,
        blocks,
        None,
        -f,
        converged,
        iters,
        trace=trace,
        grad_norm=float(np.max(np.abs(g))),
        flags=flags,
        message=message,
    )


def fit_model(model: Model | str, panel: MortalityPanel, settings: OptimSettings | None = None) -> FitResult:
    """Fit ``model`` to ``panel``; the Skellam model is fitted to its gaps."""
    model = Model(model)
    if model is Model.DOUBLE_POISSON:
        return fit_double_poisson(panel, settings)
    if model is Model.BIVARIATE_POISSON:
        return fit_bivariate_poisson(panel, settings)
    return fit_skellam(to_gap(panel), settings)


# ---------------------------------------------------------------------------
# Objective and gradient


def _check_data(model: Model, data):
    if model is Model.SKELLAM:
        return data if isinstance(data, GapPanel) else to_gap(data)
    if not isinstance(data, MortalityPanel):
        raise TypeError(f"{model.title} needs a MortalityPanel")
    return data


def negative_log_likelihood(model: Model | str, data, theta) -> float:
    """Negative log-likelihood (all constants included) at ``theta``.

    ``data`` is a :class:`MortalityPanel` for the Poisson families and a
    :class:`GapPanel` (or a panel, whose gaps are used) for Skellam.
    """
    model = Model(model)
    data = _check_data(model, data)
    theta = np.asarray(theta, dtype=float)
    if model is Model.SKELLAM:
        logpmf, _ = _skellam_terms(data, theta, with_grad=False)
        return -_fsum(logpmf)
    A, T = data.shape
    blocks, extra = unpack(theta, A, T, 2, model.n_extras)
    la, lb = _surface(blocks[0]), _surface(blocks[1])
    if model is Model.DOUBLE_POISSON:
        return -(_poisson_loglik(data.counts_a, la) + _poisson_loglik(data.counts_b, lb))
    lam3 = float(np.exp(extra[0]))
    cells, _ = _bp_cells(data.counts_a, data.counts_b, la, lb, lam3)
    return -_fsum(cells)


def gradient(model: Model | str, data, theta) -> np.ndarray:
    """Gradient of :func:`negative_log_likelihood` with respect to ``theta``.

    For the bivariate Poisson model the derivatives in the log block
    intensities are ``x - s - lambda1`` and ``y - s - lambda2`` per cell and
    the derivative in the log common rate is ``sum(s - lambda3)``, with
    ``s = E[X3 | x, y]``.
    """
    model = Model(model)
    data = _check_data(model, data)
    theta = np.asarray(theta, dtype=float)
    if model is Model.SKELLAM:
        _, g = _skellam_fg(data, theta)
        return g
    A, T = data.shape
    blocks, extra = unpack(theta, A, T, 2, model.n_extras)
    la, lb = _surface(blocks[0]), _surface(blocks[1])
    x = data.counts_a.astype(float)
    y = data.counts_b.astype(float)
    if model is Model.DOUBLE_POISSON:
        return -np.concatenate([accumulate_gradient(x - la), accumulate_gradient(y - lb)])
    lam3 = float(np.exp(extra[0]))
    _, s = _bp_cells(data.counts_a, data.counts_b, la, lb, lam3)
    s = s.reshape(A, T)
    g3 = _fsum(s) - A * T * lam3
    return -np.concatenate([accumulate_gradient(x - s - la), accumulate_gradient(y - s - lb), [g3]])
