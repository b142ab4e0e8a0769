"""Random-walk-with-drift projection of period effects and gap forecasts.

The two period-effect series of a fit (A/B, or C/D for Skellam) are
treated as one bivariate random walk with drift. Forecast intensities keep
the fitted intercepts and age effects and replace the period effect with
its point forecast ``beta_T + delta * h``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .design import MAX_LOG_INTENSITY, IntensityOverflowError
from .fit import FitResult

__all__ = [
    "PeriodSeries",
    "RwdModel",
    "ForecastResult",
    "extract_period_series",
    "fit_rwd",
    "forecast_period",
    "reconstruct_gap",
    "forecast_gap",
    "format_forecast",
    "parse_forecast",
]


@dataclass(frozen=True, eq=False)
class PeriodSeries:
    """Period effects of both series, reference year included as 0.

    Attributes
    ----------
    years : tuple of int
    values : ndarray, shape (2, T)
    labels : (str, str)
    """

    years: tuple
    values: np.ndarray
    labels: tuple = ("A", "B")

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != 2:
            raise ValueError("period series must have shape (2, T)")
        if values.shape[1] != len(self.years):
            raise ValueError(f"{values.shape[1]} columns for {len(self.years)} years")
        if not np.all(np.isfinite(values)):
            raise ValueError("period series must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(self.labels))


@dataclass(frozen=True, eq=False)
class RwdModel:
    """Bivariate random walk with drift fitted to a :class:`PeriodSeries`."""

    drift: np.ndarray
    noise_cov: np.ndarray
    origin: np.ndarray
    origin_year: int

    def __post_init__(self):
        for name in ("drift", "noise_cov", "origin"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.drift.shape != (2,) or self.origin.shape != (2,) or self.noise_cov.shape != (2, 2):
            raise ValueError("drift and origin must be 2-vectors and noise_cov 2x2")
        cov = self.noise_cov
        if abs(cov[0, 1] - cov[1, 0]) > 1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("noise covariance is not symmetric")
        if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("noise covariance is not positive semidefinite")
        object.__setattr__(self, "origin_year", int(self.origin_year))


@dataclass(frozen=True, eq=False)
class ForecastResult:
    """Point forecasts of the gap for ``h = 1 .. len(horizon_years)``.

    Attributes
    ----------
    ages : tuple of str
    horizon_years : tuple of int
    gap_forecast : ndarray, shape (ages, horizons)
    period_forecast : ndarray, shape (2, horizons)
    model : str
        Model identifier of the fit the forecast was built from.
    fit_years : (int, int)
        First and last in-sample year of that fit.
    """

    ages: tuple
    horizon_years: tuple
    gap_forecast: np.ndarray
    period_forecast: np.ndarray
    model: str
    fit_years: tuple

    def __post_init__(self):
        gap = np.array(self.gap_forecast, dtype=float)
        period = np.array(self.period_forecast, dtype=float)
        if gap.shape != (len(self.ages), len(self.horizon_years)):
            raise ValueError(f"gap forecast shape {gap.shape} does not match ages x horizons")
        if period.shape != (2, len(self.horizon_years)):
            raise ValueError("period forecast must have shape (2, horizons)")
        gap.setflags(write=False)
        period.setflags(write=False)
        object.__setattr__(self, "ages", tuple(str(a) for a in self.ages))
        object.__setattr__(self, "horizon_years", tuple(int(y) for y in self.horizon_years))
        object.__setattr__(self, "gap_forecast", gap)
        object.__setattr__(self, "period_forecast", period)
        object.__setattr__(self, "fit_years", tuple(int(y) for y in self.fit_years))


def extract_period_series(fit: FitResult) -> PeriodSeries:
    """Both period-effect rows of a fit, with the reference year's 0 first."""
    if len(fit.blocks) != 2:
        raise ValueError("fit must have two parameter blocks")
    values = np.vstack([b.full_period() for b in fit.blocks])
    return PeriodSeries(fit.years, values, fit.model.block_names)


def fit_rwd(series: PeriodSeries) -> RwdModel:
    """Drift and noise covariance of a bivariate random walk.

    The drift is the mean first difference of each row; the covariance is
    the sample covariance of the difference vectors with denominator
    ``T - 2``.

    Raises
    ------
    ValueError
        If fewer than three years are available.
    """
    values = series.values
    T = values.shape[1]
    if T < 3:
        raise ValueError(f"random walk fit needs at least 3 years, got {T}")
    diffs = np.diff(values, axis=1)
    drift = diffs.mean(axis=1)
    resid = diffs - drift[:, None]
    cov = resid @ resid.T / (T - 2)
    cov = 0.5 * (cov + cov.T)
    return RwdModel(drift, cov, values[:, -1].copy(), series.years[-1])


def forecast_period(model: RwdModel, h: int) -> np.ndarray:
    """Point forecasts ``origin + drift * j`` for ``j = 1 .. h``, shape (2, h)."""
    h = int(h)
    if h < 1:
        raise ValueError("forecast horizon must be at least 1")
    steps = np.arange(1, h + 1, dtype=float)
    return model.origin[:, None] + model.drift[:, None] * steps[None, :]


def reconstruct_gap(fit: FitResult, period_values) -> np.ndarray:
    """Gap surface for given period effects with intercepts and age effects fixed.

    Parameters
    ----------
    fit : FitResult
    period_values : array_like, shape (2, k) or (2,)
        Period effect of each series for ``k`` target years.

    Returns
    -------
    ndarray, shape (ages, k)
    """
    period = np.asarray(period_values, dtype=float)
    squeeze = period.ndim == 1
    period = period.reshape(2, -1)
    surfaces = []
    for block, row in zip(fit.blocks, period):
        eta = block.intercept + block.full_age()[:, None] + row[None, :]
        over = eta > MAX_LOG_INTENSITY
        if np.any(over):
            x, j = np.argwhere(over)[0]
            raise IntensityOverflowError(
                f"forecast linear predictor {eta[x, j]:.6g} at age {fit.ages[x]!r}, step {j + 1} exceeds {MAX_LOG_INTENSITY}"
            )
        surfaces.append(np.exp(eta))
    gap = surfaces[0] - surfaces[1]
    return gap[:, 0] if squeeze else gap


def forecast_gap(fit: FitResult, rwd: RwdModel | None = None, h: int = 1) -> ForecastResult:
    """Gap forecasts for the ``h`` years after the end of the fit window.

    ``rwd`` defaults to :func:`fit_rwd` on the fit's own period effects.
    """
    if rwd is None:
        rwd = fit_rwd(extract_period_series(fit))
    if rwd.origin_year != fit.years[-1]:
        raise ValueError(f"random walk origin {rwd.origin_year} is not the last fitted year {fit.years[-1]}")
    period = forecast_period(rwd, h)
    gap = reconstruct_gap(fit, period)
    years = [fit.years[-1] + j for j in range(1, int(h) + 1)]
    return ForecastResult(fit.ages, years, gap, period, fit.model.value, (fit.years[0], fit.years[-1]))


def format_forecast(result: ForecastResult) -> str:
    """Tidy tab-separated ``age, year, forecast_gap`` rows with a provenance header."""
    out = io.StringIO()
    out.write(f"# model={result.model} fit_years={result.fit_years[0]}:{result.fit_years[1]}\n")
    out.write("age\tyear\tforecast_gap\n")
    for i, age in enumerate(result.ages):
        for j, year in enumerate(result.horizon_years):
            out.write(f"{age}\t{year}\t{float(result.gap_forecast[i, j])!r}\n")
    out.write("# period_forecast\n")
    for j, year in enumerate(result.horizon_years):
        a, b = result.period_forecast[:, j]
        out.write(f"# {year}\t{float(a)!r}\t{float(b)!r}\n")
    return out.getvalue()


def parse_forecast(text: str) -> ForecastResult:
    """Inverse of :func:`format_forecast`."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# model="):
        raise ValueError("forecast file must start with a '# model=' provenance line")
    meta = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    start, end = (int(v) for v in meta["fit_years"].split(":"))
    if lines[1].split("\t") != ["age", "year", "forecast_gap"]:
        raise ValueError("missing 'age\\tyear\\tforecast_gap' header")
    ages: list[str] = []
    years: list[int] = []
    cells: dict = {}
    period_rows = []
    in_period = False
    for ln in lines[2:]:
        if not ln.strip():
            continue
        if ln == "# period_forecast":
            in_period = True
            continue
        if in_period:
            _, a, b = ln[2:].split("\t")
            period_rows.append((float(a), float(b)))
            continue
        age, year, value = ln.split("\t")
        year = int(year)
        if age not in ages:
            ages.append(age)
        if year not in years:
            years.append(year)
        cells[age, year] = float(value)
    gap = np.array([[cells[a, y] for y in years] for a in ages])
    period = np.array(period_rows, dtype=float).T.reshape(2, len(years))
    return ForecastResult(ages, years, gap, period, meta["model"], (start, end))
