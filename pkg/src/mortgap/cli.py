"""Command-line interface.

Subcommands read and write plain tab-separated files in ``--out``::

    fit        fit_<model>.tsv           parameter tables with provenance
    forecast   forecast_<model>.tsv      gap forecasts up to the holdout end
    evaluate   report.tsv/.txt, dm.tsv/.txt
    compare    compare_<m1>_<m2>.tsv     DM test between two models
    plot-data  heatmap.tsv, scatter.tsv
    simulate   panel.csv, true_gap.tsv
    grid       every baseline x age range x model, plus combined tables

Exit codes: 0 success, 1 usage or data error, 2 a model did not converge
(results are still written).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .artifacts import read_fit, read_forecast, write_fit, write_forecast
from .evaluation import (
    DmResult,
    EvalReport,
    dm_by_age_group,
    dm_rows,
    evaluate,
    format_dm_table,
    format_report_table,
    report_rows,
)
from .fit import FitResult, Model, OptimSettings, SkellamNumericError, fit_model
from .forecast import forecast_gap
from .panel import MortalityPanel, PanelError, load_panel, parse_schema, subset, to_gap, write_panel_csv
from .sim import load_sim_spec, simulate_panel

__all__ = ["ExperimentConfig", "CliError", "main", "run_config"]

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2

MODEL_ORDER = (Model.SKELLAM, Model.DOUBLE_POISSON, Model.BIVARIATE_POISSON)
DEFAULT_BASELINES = "1961:2000,1971:2000,1981:2000"
DEFAULT_HOLDOUT = "2001:2015"
DEFAULT_AGE_MINS = "all,40"


class CliError(Exception):
    """Usage, configuration or input error (exit code 1)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One fit/forecast/evaluate configuration."""

    data: str
    schema: dict
    baseline: tuple
    holdout: tuple | None = None
    age_min: str | None = None
    models: tuple = MODEL_ORDER
    mape_min_abs: float = 1.0
    settings: OptimSettings = field(default_factory=OptimSettings)
    out: Path = Path(".")
    seed: int | None = None

    def validate(self, panel: MortalityPanel | None = None) -> None:
        b0, b1 = self.baseline
        if b0 > b1:
            raise CliError(f"baseline {b0}:{b1} is empty")
        if self.holdout is not None:
            h0, h1 = self.holdout
            if h0 > h1:
                raise CliError(f"holdout {h0}:{h1} is empty")
            if h0 <= b1:
                raise CliError(f"holdout {h0}:{h1} must start after the baseline {b0}:{b1} ends")
        if panel is not None:
            first, last = panel.years[0], panel.years[-1]
            end = self.holdout[1] if self.holdout is not None else b1
            if b0 < first or end > last:
                raise CliError(f"windows {b0}..{end} exceed the data years {first}..{last}")

    @property
    def title(self) -> str:
        parts = [f"Baseline {self.baseline[0]}-{self.baseline[1]}"]
        if self.holdout is not None:
            parts.append(f"Forecast {self.holdout[0]}-{self.holdout[1]}")
        if self.age_min is not None:
            parts.append(f"Age >= {self.age_min}")
        return ", ".join(parts)


# ---------------------------------------------------------------------------
# Argument parsing


def _window(text: str | None) -> tuple | None:
    if text is None:
        return None
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise CliError(f"window {text!r} is not START:END") from None


def _models(text: str) -> tuple:
    try:
        wanted = {Model(m.strip().lower()) for m in text.split(",") if m.strip()}
    except ValueError as exc:
        raise CliError(f"unknown model in {text!r}; choose from skellam, dp, bp") from exc
    if not wanted:
        raise CliError("no models requested")
    return tuple(m for m in MODEL_ORDER if m in wanted)


def _age_min(text: str | None) -> str | None:
    return None if text is None or text.lower() == "all" else text


def _data_path(text: str | None) -> str:
    if text is None:
        raise CliError("--data is required (a CSV path, or 'bundled' for the synthetic panel)")
    if text == "bundled":
        return str(resources.files("mortgap") / "data" / "synthetic_panel.csv")
    return text


def _config(args, baseline=None, age_min=None) -> ExperimentConfig:
    base = baseline if baseline is not None else _window(args.baseline)
    if base is None:
        raise CliError("--baseline START:END is required")
    try:
        schema = parse_schema(args.schema)
    except (ValueError, OSError) as exc:
        raise CliError(f"bad --schema: {exc}") from exc
    return ExperimentConfig(
        data=_data_path(args.data),
        schema=schema,
        baseline=base,
        holdout=_window(args.holdout),
        age_min=_age_min(args.age_min) if age_min is None else _age_min(age_min),
        models=_models(args.models),
        mape_min_abs=float(args.mape_min_abs),
        out=Path(args.out),
        seed=args.seed,
    )


def _load(cfg: ExperimentConfig) -> MortalityPanel:
    try:
        panel = load_panel(cfg.data, cfg.schema)
    except FileNotFoundError:
        raise CliError(f"data file {cfg.data!r} not found") from None
    cfg.validate(panel)
    return panel


def _require_holdout(cfg: ExperimentConfig) -> tuple:
    if cfg.holdout is None:
        raise CliError("--holdout START:END is required")
    return cfg.holdout


def _fit_path(cfg, model):
    return cfg.out / f"fit_{model.value}.tsv"


def _forecast_path(cfg, model):
    return cfg.out / f"forecast_{model.value}.tsv"


def _read_fit(cfg, model) -> FitResult:
    path = _fit_path(cfg, model)
    if not path.exists():
        raise CliError(f"missing fit file {path}; run 'mortgap fit' first")
    return read_fit(path)


def _read_forecast(cfg, model):
    path = _forecast_path(cfg, model)
    if not path.exists():
        raise CliError(f"missing forecast file {path}; run 'mortgap forecast' first")
    return read_forecast(path)


def _check_fit(cfg, fit: FitResult, sub: MortalityPanel) -> None:
    if fit.years != sub.years or fit.ages != sub.ages:
        raise CliError(
            f"{fit.model.value} fit covers {fit.years[0]}-{fit.years[-1]} and ages from {fit.ages[0]!r}, "
            f"but the configuration asks for {sub.years[0]}-{sub.years[-1]} from {sub.ages[0]!r}"
        )


def _check_forecast(cfg, fit: FitResult, fc) -> None:
    if fc.model != fit.model.value or fc.fit_years != (fit.years[0], fit.years[-1]) or fc.ages != fit.ages:
        raise CliError(f"forecast for {fc.model} ({fc.fit_years}) does not come from the {fit.model.value} fit")
    h0, h1 = cfg.holdout
    if h0 not in fc.horizon_years or h1 not in fc.horizon_years:
        raise CliError(f"forecast years {fc.horizon_years[0]}-{fc.horizon_years[-1]} do not cover holdout {h0}-{h1}")


def _holdout_columns(fc, holdout) -> np.ndarray:
    idx = [fc.horizon_years.index(y) for y in range(holdout[0], holdout[1] + 1)]
    return fc.gap_forecast[:, idx]


# ---------------------------------------------------------------------------
# Commands


def run_fit(cfg: ExperimentConfig, log=print) -> tuple[dict, bool]:
    panel = _load(cfg)
    sub = subset(panel, cfg.age_min, cfg.baseline)
    cfg.out.mkdir(parents=True, exist_ok=True)
    fits = {}
    ok = True
    for model in cfg.models:
        try:
            fit = fit_model(model, sub, cfg.settings)
        except SkellamNumericError as exc:
            log(f"{model.value}: failed: {exc}")
            ok = False
            continue
        write_fit(fit, _fit_path(cfg, model))
        fits[model] = fit
        status = "converged" if fit.converged else "NOT converged"
        flags = f" [{'; '.join(fit.flags)}]" if fit.flags else ""
        log(f"{model.value}: {status} after {fit.iterations} iterations, log-lik {fit.log_lik:.4f}{flags}")
        ok &= fit.converged
    return fits, ok


def run_forecast(cfg: ExperimentConfig, log=print) -> dict:
    h0, h1 = _require_holdout(cfg)
    out = {}
    for model in cfg.models:
        fit = _read_fit(cfg, model)
        last = fit.years[-1]
        if h0 <= last:
            raise CliError(f"holdout starts in {h0}, inside the {model.value} fit window ending {last}")
        fc = forecast_gap(fit, h=h1 - last)
        write_forecast(fc, _forecast_path(cfg, model))
        out[model] = fc
        log(f"{model.value}: forecast {fc.horizon_years[0]}-{fc.horizon_years[-1]}")
    return out


def _artifacts(cfg: ExperimentConfig):
    holdout = _require_holdout(cfg)
    panel = _load(cfg)
    sub = subset(panel, cfg.age_min, cfg.baseline)
    held = subset(panel, cfg.age_min, holdout)
    fits, fcs = {}, {}
    for model in cfg.models:
        fits[model] = _read_fit(cfg, model)
        _check_fit(cfg, fits[model], sub)
        fcs[model] = _read_forecast(cfg, model)
        _check_forecast(cfg, fits[model], fcs[model])
    return sub, held, fits, fcs


def run_evaluate(cfg: ExperimentConfig, log=print) -> tuple[list, dict]:
    sub, held, fits, fcs = _artifacts(cfg)
    observed_in = to_gap(sub).gaps
    observed_out = to_gap(held).gaps
    reports = []
    for model in cfg.models:
        fit = fits[model]
        reports.append(
            evaluate(
                model.title,
                fit.log_lik,
                fit.n_params,
                fit.n_obs,
                observed_in,
                fit.fitted_gap,
                observed_out,
                _holdout_columns(fcs[model], cfg.holdout),
                cfg.mape_min_abs,
            )
        )
    dm: dict[str, list[DmResult]] = {}
    if Model.SKELLAM in fcs:
        sk = _holdout_columns(fcs[Model.SKELLAM], cfg.holdout)
        for other in (Model.DOUBLE_POISSON, Model.BIVARIATE_POISSON):
            if other in fcs:
                label = f"Skellam vs {other.title}"
                dm[label] = dm_by_age_group(to_gap(held), sk, _holdout_columns(fcs[other], cfg.holdout))
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "report.tsv").write_text(report_rows(reports), encoding="utf-8")
    (cfg.out / "report.txt").write_text(format_report_table(reports, cfg.title), encoding="utf-8")
    (cfg.out / "dm.tsv").write_text(dm_rows(dm), encoding="utf-8")
    (cfg.out / "dm.txt").write_text(format_dm_table(dm, cfg.title) if dm else "", encoding="utf-8")
    log(format_report_table(reports, cfg.title))
    return reports, dm


def run_compare(cfg: ExperimentConfig, log=print) -> list:
    if len(cfg.models) != 2:
        raise CliError("compare needs exactly two models in --models")
    _, held, _, fcs = _artifacts(cfg)
    m1, m2 = cfg.models
    res = dm_by_age_group(
        to_gap(held), _holdout_columns(fcs[m1], cfg.holdout), _holdout_columns(fcs[m2], cfg.holdout)
    )
    label = f"{m1.title} vs {m2.title}"
    (cfg.out / f"compare_{m1.value}_{m2.value}.tsv").write_text(dm_rows({label: res}), encoding="utf-8")
    log(format_dm_table({label: res}, cfg.title))
    return res


def run_plot_data(cfg: ExperimentConfig, log=print) -> None:
    sub, held, fits, fcs = _artifacts(cfg)
    observed_in = to_gap(sub)
    observed_out = to_gap(held)
    heat = ["model\tage\tyear\trmse"]
    scatter = ["model\tage\tyear\tobserved_gap\tfitted_or_forecast_gap\tphase"]
    for model in cfg.models:
        fc = _holdout_columns(fcs[model], cfg.holdout)
        err = np.abs(fc - observed_out.gaps)
        for i, age in enumerate(held.ages):
            for j, year in enumerate(held.years):
                heat.append(f"{model.value}\t{age}\t{year}\t{float(err[i, j])!r}")
        fitted = fits[model].fitted_gap
        for i, age in enumerate(sub.ages):
            for j, year in enumerate(sub.years):
                scatter.append(
                    f"{model.value}\t{age}\t{year}\t{int(observed_in.gaps[i, j])}\t{float(fitted[i, j])!r}\tin"
                )
            for j, year in enumerate(held.years):
                scatter.append(
                    f"{model.value}\t{age}\t{year}\t{int(observed_out.gaps[i, j])}\t{float(fc[i, j])!r}\tout"
                )
    (cfg.out / "heatmap.tsv").write_text("\n".join(heat) + "\n", encoding="utf-8")
    (cfg.out / "scatter.tsv").write_text("\n".join(scatter) + "\n", encoding="utf-8")
    log(f"wrote {cfg.out / 'heatmap.tsv'} and {cfg.out / 'scatter.tsv'}")


def run_simulate(spec_path: str, out: Path, seed: int | None, schema, log=print) -> MortalityPanel:
    try:
        spec = load_sim_spec(spec_path)
    except FileNotFoundError:
        raise CliError(f"simulation spec {spec_path!r} not found") from None
    except (KeyError, ValueError) as exc:
        raise CliError(f"bad simulation spec: {exc}") from exc
    if seed is not None:
        spec = replace(spec, seed=int(seed))
    panel, _ = simulate_panel(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_panel_csv(panel, out / "panel.csv", schema)
    gap = spec.true_gap()
    lines = ["age\tyear\texpected_gap"]
    for i, age in enumerate(panel.ages):
        for j, year in enumerate(panel.years):
            lines.append(f"{age}\t{year}\t{float(gap[i, j])!r}")
    (out / "true_gap.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log(f"wrote {out / 'panel.csv'} ({len(panel.ages)} ages x {len(panel.years)} years, seed {spec.seed})")
    return panel


def run_config(cfg: ExperimentConfig, log=print) -> tuple[list, dict, bool]:
    """Fit, forecast, evaluate and emit plot data for one configuration."""
    _, ok = run_fit(cfg, log)
    run_forecast(cfg, log)
    reports, dm = run_evaluate(cfg, log)
    run_plot_data(cfg, log)
    return reports, dm, ok


def _tag(cfg: ExperimentConfig) -> str:
    ages = "all" if cfg.age_min is None else f"age{cfg.age_min}"
    return f"baseline{cfg.baseline[0]}-{cfg.baseline[1]}_{ages}"


def run_grid(args, log=print) -> bool:
    baselines = [_window(b) for b in args.baselines.split(",")]
    age_mins = [a.strip() for a in args.age_mins.split(",")]
    if args.holdout is None:
        args.holdout = DEFAULT_HOLDOUT
    root = Path(args.out)
    all_ok = True
    report_lines: list[str] = []
    dm_lines: list[str] = []
    heat_lines: list[str] = []
    tables: list[str] = []
    dm_tables: list[str] = []
    header_done = dm_header_done = heat_header_done = False
    for age_min in age_mins:
        section = []
        dm_columns: dict[str, list[DmResult]] = {}
        for base in baselines:
            cfg = _config(args, baseline=base, age_min=age_min)
            cfg = replace(cfg, out=root / _tag(cfg))
            reports, dm, ok = run_config(cfg, log)
            all_ok &= ok
            section.append(format_report_table(reports, cfg.title))
            ctx = {"baseline": f"{base[0]}-{base[1]}", "age_min": age_min}
            rows = report_rows(reports, **ctx).splitlines()
            report_lines += rows if not header_done else rows[1:]
            header_done = True
            rows = dm_rows(dm, **ctx).splitlines()
            dm_lines += rows if not dm_header_done else rows[1:]
            dm_header_done = True
            for label, res in dm.items():
                short = "DP" if "Double" in label else "BP"
                dm_columns[f"{base[0]}-{base[1]} {short}"] = res
            heat = (cfg.out / "heatmap.tsv").read_text(encoding="utf-8").splitlines()
            if not heat_header_done:
                heat_lines.append("baseline\tage_min\t" + heat[0])
                heat_header_done = True
            heat_lines += [f"{ctx['baseline']}\t{age_min}\t{ln}" for ln in heat[1:]]
        scope = "all ages" if _age_min(age_min) is None else f"ages >= {age_min}"
        tables.append(f"== In-sample and out-of-sample accuracy, {scope} ==\n\n" + "\n".join(section))
        if dm_columns:
            dm_tables.append(
                format_dm_table(dm_columns, f"== DM test, Skellam against DP and BP, {scope}, holdout {args.holdout} ==")
            )
    root.mkdir(parents=True, exist_ok=True)
    (root / "tables.txt").write_text("\n".join(tables), encoding="utf-8")
    (root / "tables.tsv").write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    (root / "dm_tables.txt").write_text("\n".join(dm_tables), encoding="utf-8")
    (root / "dm.tsv").write_text("\n".join(dm_lines) + "\n", encoding="utf-8")
    (root / "heatmap.tsv").write_text("\n".join(heat_lines) + "\n", encoding="utf-8")
    log(f"grid tables written to {root}")
    return all_ok


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="long-format CSV, or 'bundled' for the synthetic panel")
    p.add_argument("--schema", help="column mapping: JSON file or 'age=col,year=col,population=col,count=col'")
    p.add_argument("--baseline", help="in-sample window START:END")
    p.add_argument("--holdout", help="out-of-sample window START:END")
    p.add_argument("--age-min", help="lowest age group to keep, e.g. 40 or 40-44 (default: all)")
    p.add_argument("--models", default="skellam,dp,bp", help="comma-separated subset of skellam,dp,bp")
    p.add_argument("--seed", type=int, help="random seed (simulate); other commands are deterministic")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--mape-min-abs", type=float, default=1.0, help="exclude cells with |gap| below this from MAPE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mortgap", description="Age-period models for gaps in death counts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("fit", "fit the models on the baseline window"),
        ("forecast", "forecast the gap over the holdout window"),
        ("evaluate", "in-sample and out-of-sample criteria and DM tests"),
        ("compare", "DM test between two models"),
        ("plot-data", "tidy heatmap and scatter data"),
    ):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("simulate", help="simulate a panel from a JSON spec")
    _common(p)
    p.add_argument("--spec", required=True, help="JSON simulation spec")
    p = sub.add_parser("grid", help="run every baseline x age range x model")
    _common(p)
    p.add_argument("--baselines", default=DEFAULT_BASELINES, help="comma-separated START:END windows")
    p.add_argument("--age-mins", default=DEFAULT_AGE_MINS, help="comma-separated age ranges ('all' or a label)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = print
    try:
        if args.command == "simulate":
            run_simulate(args.spec, Path(args.out), args.seed, parse_schema(args.schema), log)
            return EXIT_OK
        if args.command == "grid":
            return EXIT_OK if run_grid(args, log) else EXIT_NONCONVERGED
        cfg = _config(args)
        if args.command == "fit":
            _, ok = run_fit(cfg, log)
            return EXIT_OK if ok else EXIT_NONCONVERGED
        if args.command == "forecast":
            run_forecast(cfg, log)
        elif args.command == "evaluate":
            run_evaluate(cfg, log)
        elif args.command == "compare":
            run_compare(cfg, log)
        elif args.command == "plot-data":
            run_plot_data(cfg, log)
        return EXIT_OK
    except (CliError, PanelError, ValueError, OSError) as exc:
        print(f"mortgap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
