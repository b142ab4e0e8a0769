"""Information criteria, error metrics and the Diebold-Mariano test.

Error metrics aggregate jointly over every (age, year) cell of the scored
window. The Diebold-Mariano statistic uses squared-error loss and the plain
sample variance of the loss differential, which ignores the autocorrelation
of multi-step forecast errors.
"""

from __future__ import annotations

import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .panel import GapPanel, age_lower_bound

__all__ = [
    "Significance",
    "DmResult",
    "EvalReport",
    "IN_SAMPLE_COLUMNS",
    "OUT_OF_SAMPLE_COLUMNS",
    "information_criteria",
    "error_metrics",
    "dm_test",
    "default_age_groups",
    "dm_by_age_group",
    "evaluate",
    "report_rows",
    "format_report_table",
    "dm_rows",
    "format_dm_table",
]

IN_SAMPLE_COLUMNS = ("BIC", "AIC", "AICc", "RMSE", "MAE", "MAPE")
OUT_OF_SAMPLE_COLUMNS = ("RMSE", "MAE", "MAPE")

# relative slack for RMSE >= MAE, which can fail by an ulp when all |e| are equal
_POWER_MEAN_RTOL = 1e-12


class Significance(str, enum.Enum):
    """Two-sided significance level, rendered as stars."""

    NONE = ""
    P05 = "*"
    P01 = "**"
    P001 = "***"

    @classmethod
    def from_p(cls, p: float) -> "Significance":
        if not np.isfinite(p):
            return cls.NONE
        if p < 0.001:
            return cls.P001
        if p < 0.01:
            return cls.P01
        if p < 0.05:
            return cls.P05
        return cls.NONE


@dataclass(frozen=True)
class DmResult:
    """Diebold-Mariano comparison of two error series.

    A negative statistic means the first series has the smaller squared
    errors. ``degenerate`` marks a zero-variance loss differential; the
    statistic is then 0 for identical losses and signed infinity otherwise.
    """

    age_group: str
    statistic: float
    p_value: float
    n: int
    significance: Significance = Significance.NONE
    degenerate: bool = False
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "significance", Significance(self.significance))
        if not self.degenerate and self.significance is not Significance.from_p(self.p_value):
            raise ValueError("significance does not match p_value")

    @property
    def stars(self) -> str:
        return self.significance.value


@dataclass(frozen=True)
class EvalReport:
    """In-sample and out-of-sample scores of one fitted model.

    ``in_sample`` maps ``log_lik, AIC, AICc, BIC, RMSE, MAE, MAPE`` to values
    and ``out_of_sample`` maps ``RMSE, MAE, MAPE``; absent values are None.
    """

    model: str
    in_sample: Mapping[str, float | None]
    out_of_sample: Mapping[str, float | None] = field(default_factory=dict)
    cells_used: int = 0
    mape_excluded_cells: int = 0

    def __post_init__(self):
        object.__setattr__(self, "in_sample", dict(self.in_sample))
        object.__setattr__(self, "out_of_sample", dict(self.out_of_sample))
        ic = self.in_sample
        if ic.get("AICc") is not None and ic.get("AIC") is not None and ic["AICc"] < ic["AIC"]:
            raise ValueError("AICc below AIC")
        for part in (self.in_sample, self.out_of_sample):
            for key in ("RMSE", "MAE", "MAPE"):
                val = part.get(key)
                if val is not None and val < 0:
                    raise ValueError(f"{key} must be nonnegative")
            _check_power_mean(part)


def _check_power_mean(metrics):
    rmse, mae = metrics.get("RMSE"), metrics.get("MAE")
    if rmse is not None and mae is not None and rmse < mae * (1.0 - _POWER_MEAN_RTOL):
        raise AssertionError(f"RMSE {rmse!r} below MAE {mae!r}")


def information_criteria(log_lik: float, p: int, n: int) -> dict:
    """AIC, AICc and BIC.

    ``AICc`` is None when ``n <= p + 1``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    aic = 2.0 * p - 2.0 * log_lik
    aicc = aic + (2.0 * p * p + 2.0 * p) / (n - p - 1) if n > p + 1 else None
    bic = p * math.log(n) - 2.0 * log_lik
    return {"AIC": aic, "AICc": aicc, "BIC": bic}


def error_metrics(actual, predicted, mape_min_abs: float = 1.0) -> dict:
    """RMSE, MAE and MAPE (in percent) over all cells.

    Cells with ``|actual| < mape_min_abs`` are left out of MAPE only and
    counted in ``excluded``; MAPE is None when no cell remains.
    """
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape:
        raise ValueError(f"grids differ in shape: {actual.shape} vs {predicted.shape}")
    err = (predicted - actual).ravel()
    n = err.size
    if n == 0:
        raise ValueError("no cells to score")
    mae = math.fsum(np.abs(err)) / n
    # scaled by the largest error so squares neither overflow nor underflow
    top = float(np.max(np.abs(err)))
    rmse = top * math.sqrt(math.fsum((err / top) ** 2) / n) if top > 0 else 0.0
    keep = np.abs(actual.ravel()) >= mape_min_abs
    n_keep = int(keep.sum())
    mape = math.fsum(100.0 * np.abs(err[keep]) / np.abs(actual.ravel()[keep])) / n_keep if n_keep else None
    out = {"RMSE": rmse, "MAE": mae, "MAPE": mape, "excluded": n - n_keep, "n": n}
    _check_power_mean(out)
    return out


def _normal_two_sided(stat: float) -> float:
    return math.erfc(abs(stat) / math.sqrt(2.0))


def dm_test(errors_1, errors_2, age_group: str = "") -> DmResult:
    """Diebold-Mariano test of equal squared-error loss.

    ``d_t = e1_t**2 - e2_t**2`` and ``DM = mean(d) / sqrt(var(d) / N)`` with
    the ``N - 1`` variance denominator; the p-value is two-sided against the
    standard normal.
    """
    e1 = np.asarray(errors_1, dtype=float).ravel()
    e2 = np.asarray(errors_2, dtype=float).ravel()
    if e1.shape != e2.shape:
        raise ValueError("error series must have equal length")
    n = e1.size
    if n < 2:
        raise ValueError("need at least two errors")
    d = e1 * e1 - e2 * e2
    dbar = math.fsum(d) / n
    dev = d - dbar
    s = math.fsum(dev * dev) / (n - 1)
    if s == 0.0:
        if dbar == 0.0:
            return DmResult(age_group, 0.0, 1.0, n, Significance.NONE, True, "degenerate: identical losses")
        sign = "+" if dbar > 0 else "-"
        return DmResult(
            age_group,
            math.copysign(math.inf, dbar),
            math.nan,
            n,
            Significance.NONE,
            True,
            f"degenerate: constant loss differential ({sign})",
        )
    stat = dbar / math.sqrt(s / n)
    p = _normal_two_sided(stat)
    return DmResult(age_group, stat, p, n, Significance.from_p(p))


def default_age_groups(ages: Sequence[str], width: int = 5) -> list[tuple[str, list[str]]]:
    """Partition age labels into ``width``-year groups by lower bound.

    Returns ``(label, members)`` pairs. The last group is labelled
    open-ended (``"80+"``) when its last member is.
    """
    groups: dict[int, list[str]] = {}
    for a in ages:
        groups.setdefault(age_lower_bound(a) // width * width, []).append(a)
    keys = sorted(groups)
    out = []
    for i, k in enumerate(keys):
        members = groups[k]
        is_open = i == len(keys) - 1 and str(members[-1]).endswith("+")
        label = f"{k}+" if is_open else f"{k}-{k + width - 1}"
        out.append((label, members))
    return out


def dm_by_age_group(
    actual: GapPanel,
    forecast_1,
    forecast_2,
    groups: Sequence[tuple[str, Sequence[str]]] | None = None,
) -> list[DmResult]:
    """Diebold-Mariano test per age group over the holdout years.

    Within a group, gaps are summed over ages for each year before the
    error ``forecast - actual`` is taken. Groups without any panel age are
    skipped with a warning.
    """
    f1 = np.asarray(forecast_1, dtype=float)
    f2 = np.asarray(forecast_2, dtype=float)
    obs = actual.gaps.astype(float)
    if f1.shape != obs.shape or f2.shape != obs.shape:
        raise ValueError("forecast grids must match the holdout panel")
    if groups is None:
        groups = default_age_groups(actual.ages)
    index = {a: i for i, a in enumerate(actual.ages)}
    covered = [a for _, members in groups for a in members if a in index]
    if sorted(covered, key=index.get) != list(actual.ages):
        raise ValueError("age groups must partition the panel's ages")
    results = []
    for label, members in groups:
        rows = [index[a] for a in members if a in index]
        if not rows:
            warnings.warn(f"age group {label!r} has no ages in the panel; skipped", stacklevel=2)
            continue
        y = obs[rows].sum(axis=0)
        results.append(dm_test(f1[rows].sum(axis=0) - y, f2[rows].sum(axis=0) - y, label))
    return results


def evaluate(
    model: str,
    log_lik: float,
    n_params: int,
    n_obs: int,
    observed_in,
    fitted_in,
    observed_out=None,
    forecast_out=None,
    mape_min_abs: float = 1.0,
) -> EvalReport:
    """Score a fit in sample and, when given, its forecast out of sample."""
    ic = information_criteria(log_lik, n_params, n_obs)
    ins = error_metrics(observed_in, fitted_in, mape_min_abs)
    in_sample = {"log_lik": float(log_lik), **ic, "RMSE": ins["RMSE"], "MAE": ins["MAE"], "MAPE": ins["MAPE"]}
    excluded = ins["excluded"]
    out_sample = {}
    if observed_out is not None:
        outs = error_metrics(observed_out, forecast_out, mape_min_abs)
        out_sample = {"RMSE": outs["RMSE"], "MAE": outs["MAE"], "MAPE": outs["MAPE"]}
        excluded += outs["excluded"]
    return EvalReport(model, in_sample, out_sample, int(n_obs), int(excluded))


# ---------------------------------------------------------------------------
# Rendering


def _fmt(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def _ranks(values) -> list[str]:
    # "1st"/"2nd" for the lowest and second lowest distinct present values
    present = sorted({v for v in values if v is not None and not math.isnan(v)})
    out = []
    for v in values:
        if v is None or math.isnan(v):
            out.append("")
        elif v == present[0]:
            out.append("1st")
        elif len(present) > 1 and v == present[1]:
            out.append("2nd")
        else:
            out.append("")
    return out


def report_rows(reports: Sequence[EvalReport], **context) -> str:
    """Tidy tab-separated ``[context...], model, phase, metric, value`` rows."""
    keys = list(context)
    out = io.StringIO()
    out.write("\t".join(keys + ["model", "phase", "metric", "value"]) + "\n")
    prefix = "".join(f"{context[k]}\t" for k in keys)
    for r in reports:
        for phase, cols, part in (
            ("in", ("log_lik",) + IN_SAMPLE_COLUMNS, r.in_sample),
            ("out", OUT_OF_SAMPLE_COLUMNS, r.out_of_sample),
        ):
            for metric in cols:
                if metric not in part:
                    continue
                val = part[metric]
                out.write(f"{prefix}{r.model}\t{phase}\t{metric}\t{'NA' if val is None else repr(float(val))}\n")
        out.write(f"{prefix}{r.model}\tin\tcells_used\t{r.cells_used}\n")
        out.write(f"{prefix}{r.model}\tall\tmape_excluded_cells\t{r.mape_excluded_cells}\n")
    return out.getvalue()


def format_report_table(reports: Sequence[EvalReport], title: str = "") -> str:
    """Aligned text table: in-sample BIC AIC AICc RMSE MAE MAPE, then out-of-sample RMSE MAE MAPE.

    The lowest and second lowest value of each column carry ``1st`` and
    ``2nd`` annotations.
    """
    cols = [("in", c) for c in IN_SAMPLE_COLUMNS] + [("out", c) for c in OUT_OF_SAMPLE_COLUMNS]
    cells = []
    for phase, c in cols:
        vals = [(r.in_sample if phase == "in" else r.out_of_sample).get(c) for r in reports]
        ranks = _ranks(vals)
        cells.append([_fmt(v) + (f" ({k})" if k else "") for v, k in zip(vals, ranks)])
    names = [r.model for r in reports]
    name_w = max([len("Model")] + [len(n) for n in names])
    widths = [max(len(c), *(len(x) for x in col)) for (_, c), col in zip(cols, cells)]
    in_w = sum(widths[:6]) + 2 * 5
    out_w = sum(widths[6:]) + 2 * 2
    lines = []
    if title:
        lines.append(title)
    lines.append(" " * name_w + " | " + "In-Sample".center(in_w) + " | " + "Out-of-Sample".center(out_w))
    head = [c.rjust(w) for (_, c), w in zip(cols, widths)]
    lines.append("Model".ljust(name_w) + " | " + "  ".join(head[:6]) + " | " + "  ".join(head[6:]))
    lines.append("-" * len(lines[-1]))
    for i, name in enumerate(names):
        row = [col[i].rjust(w) for col, w in zip(cells, widths)]
        lines.append(name.ljust(name_w) + " | " + "  ".join(row[:6]) + " | " + "  ".join(row[6:]))
    return "\n".join(lines) + "\n"


def dm_rows(results: Mapping[str, Sequence[DmResult]], **context) -> str:
    """Tidy tab-separated rows for DM results keyed by comparison label."""
    keys = list(context)
    out = io.StringIO()
    out.write("\t".join(keys + ["comparison", "age_group", "statistic", "p_value", "n", "stars", "note"]) + "\n")
    prefix = "".join(f"{context[k]}\t" for k in keys)
    for label, res in results.items():
        for r in res:
            out.write(
                f"{prefix}{label}\t{r.age_group}\t{r.statistic!r}\t{r.p_value!r}\t{r.n}\t{r.stars}\t{r.note}\n"
            )
    return out.getvalue()


def format_dm_table(columns: Mapping[str, Sequence[DmResult]], title: str = "") -> str:
    """Aligned text table: one row per age group, one column per comparison.

    Cells read ``-3.154**``; stars mark two-sided significance at 5%
    (``*``), 1% (``**``) and 0.1% (``***``). Degenerate comparisons show
    ``degenerate``.
    """
    labels = list(columns)
    groups: list[str] = []
    for res in columns.values():
        for r in res:
            if r.age_group not in groups:
                groups.append(r.age_group)
    lookup = {(lab, r.age_group): r for lab, res in columns.items() for r in res}

    def cell(lab, g):
        r = lookup.get((lab, g))
        if r is None:
            return "-"
        if r.degenerate:
            return "degenerate"
        return f"{r.statistic:.3f}{r.stars}"

    grid = [[cell(lab, g) for lab in labels] for g in groups]
    gw = max([len("Age Group")] + [len(g) for g in groups])
    widths = [max(len(lab), *(len(row[j]) for row in grid)) if grid else len(lab) for j, lab in enumerate(labels)]
    lines = [title] if title else []
    lines.append("Age Group".ljust(gw) + " | " + " | ".join(lab.rjust(w) for lab, w in zip(labels, widths)))
    lines.append("-" * len(lines[-1]))
    for g, row in zip(groups, grid):
        lines.append(g.ljust(gw) + " | " + " | ".join(c.rjust(w) for c, w in zip(row, widths)))
    lines.append("*** p < 0.001, ** p < 0.01, * p < 0.05 (two-sided)")
    return "\n".join(lines) + "\n"
