import json
import math
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mortgap import cli
from mortgap.artifacts import read_fit, read_forecast
from mortgap.fit import OptimSettings
from mortgap.evaluation import IN_SAMPLE_COLUMNS, OUT_OF_SAMPLE_COLUMNS, evaluate
from mortgap.panel import load_panel, subset, to_gap

WINDOW = ["--data", "bundled", "--baseline", "1981:2000", "--holdout", "2001:2015"]
STEPS = ("fit", "forecast", "evaluate", "plot-data")


def _run(out, *extra, steps=STEPS):
    for step in steps:
        code = cli.main([step, *WINDOW, "--out", str(out), *extra])
        if code != cli.EXIT_OK:
            return code
    return cli.EXIT_OK


def _tsv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    lines = [ln for ln in lines if not ln.startswith("#")]
    head = lines[0].split("\t")
    return [dict(zip(head, ln.split("\t"))) for ln in lines[1:]]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert _run(out) == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def bundled():
    return load_panel(cli._data_path("bundled"))


def test_fit_all_models_writes_three_files(pipeline):
    assert sorted(p.name for p in pipeline.glob("fit_*.tsv")) == ["fit_bp.tsv", "fit_dp.tsv", "fit_skellam.tsv"]


def test_fit_skellam_only_writes_one_file(tmp_path):
    assert cli.main(["fit", *WINDOW, "--models", "skellam", "--out", str(tmp_path)]) == cli.EXIT_OK
    assert [p.name for p in tmp_path.glob("fit_*.tsv")] == ["fit_skellam.tsv"]


def test_overlapping_windows_exit_1(tmp_path, capsys):
    args = ["fit", "--data", "bundled", "--baseline", "1981:2005", "--holdout", "2001:2015", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_USAGE
    assert "baseline" in capsys.readouterr().err
    assert not list(tmp_path.glob("fit_*.tsv"))


@pytest.mark.parametrize(
    "args",
    [
        ["--baseline", "1950:2000", "--holdout", "2001:2015"],
        ["--baseline", "1981:2000", "--holdout", "2001:2030"],
        ["--baseline", "2000:1981", "--holdout", "2001:2015"],
        ["--baseline", "1981-2000", "--holdout", "2001:2015"],
        ["--baseline", "1981:2000", "--models", "skellam,gamma"],
        ["--baseline", "1981:2000", "--age-min", "95"],
    ],
)
def test_bad_config_exit_1(tmp_path, args):
    assert cli.main(["fit", "--data", "bundled", *args, "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_missing_data_file_exit_1(tmp_path):
    args = ["fit", "--data", str(tmp_path / "nope.csv"), "--baseline", "1981:2000", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_USAGE


def test_forecast_without_fit_exit_1(tmp_path, capsys):
    assert cli.main(["forecast", *WINDOW, "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert "missing fit" in capsys.readouterr().err


def test_forecast_files_cover_holdout(pipeline):
    for model in ("skellam", "dp", "bp"):
        fc = read_forecast(pipeline / f"forecast_{model}.tsv")
        assert fc.model == model
        assert fc.fit_years == (1981, 2000)
        assert fc.horizon_years == tuple(range(2001, 2016))
        assert np.all(np.isfinite(fc.gap_forecast))


def test_evaluate_with_mismatched_windows_exit_1(pipeline, tmp_path):
    for p in pipeline.glob("f*_*.tsv"):
        shutil.copy(p, tmp_path / p.name)
    args = ["evaluate", "--data", "bundled", "--baseline", "1971:2000", "--holdout", "2001:2015"]
    assert cli.main([*args, "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_evaluate_forecast_from_other_fit_exit_1(pipeline, tmp_path):
    for p in pipeline.glob("f*_*.tsv"):
        shutil.copy(p, tmp_path / p.name)
    shutil.copy(pipeline / "forecast_dp.tsv", tmp_path / "forecast_bp.tsv")
    assert cli.main(["evaluate", *WINDOW, "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_report_invariants(pipeline):
    rows = _tsv(pipeline / "report.tsv")
    by = {(r["model"], r["phase"], r["metric"]): r["value"] for r in rows}
    for model in ("Skellam", "Double Poisson", "Bivariate Poisson"):
        for metric in IN_SAMPLE_COLUMNS:
            assert math.isfinite(float(by[(model, "in", metric)]))
        for phase in ("in", "out"):
            assert float(by[(model, phase, "RMSE")]) >= float(by[(model, phase, "MAE")])


def test_report_column_layout(pipeline):
    assert IN_SAMPLE_COLUMNS == ("BIC", "AIC", "AICc", "RMSE", "MAE", "MAPE")
    assert OUT_OF_SAMPLE_COLUMNS == ("RMSE", "MAE", "MAPE")
    lines = (pipeline / "report.txt").read_text(encoding="utf-8").splitlines()
    band, head = lines[1], lines[2]
    assert band.index("In-Sample") < band.index("Out-of-Sample")
    left, right = head.split("|")[1:]
    assert left.split() == list(IN_SAMPLE_COLUMNS)
    assert right.split() == list(OUT_OF_SAMPLE_COLUMNS)
    names = [ln.split("|")[0].strip() for ln in lines[4:] if ln.strip()]
    assert names == ["Skellam", "Double Poisson", "Bivariate Poisson"]


def test_report_cells_reproducible_from_artifacts(pipeline, bundled):
    sub = subset(bundled, None, (1981, 2000))
    held = subset(bundled, None, (2001, 2015))
    by = {(r["model"], r["phase"], r["metric"]): float(r["value"]) for r in _tsv(pipeline / "report.tsv")}
    for model in ("skellam", "dp", "bp"):
        fit = read_fit(pipeline / f"fit_{model}.tsv")
        fc = read_forecast(pipeline / f"forecast_{model}.tsv")
        rep = evaluate(
            fit.model.title,
            fit.log_lik,
            fit.n_params,
            fit.n_obs,
            to_gap(sub).gaps,
            fit.fitted_gap,
            to_gap(held).gaps,
            fc.gap_forecast,
        )
        for metric, val in rep.in_sample.items():
            assert by[(rep.model, "in", metric)] == val
        for metric, val in rep.out_of_sample.items():
            assert by[(rep.model, "out", metric)] == val


def test_dm_runs_skellam_against_both(pipeline, bundled):
    rows = _tsv(pipeline / "dm.tsv")
    assert {r["comparison"] for r in rows} == {"Skellam vs Double Poisson", "Skellam vs Bivariate Poisson"}
    for r in rows:
        assert int(r["n"]) == 15
        assert r["stars"] in ("", "*", "**", "***")
    assert len(rows) == 2 * len(bundled.ages)


def test_identical_forecasts_give_degenerate_dm(pipeline, tmp_path):
    for p in pipeline.glob("f*_*.tsv"):
        shutil.copy(p, tmp_path / p.name)
    # dp forecast file with the Skellam numbers but dp provenance
    sk = (pipeline / "forecast_skellam.tsv").read_text(encoding="utf-8").splitlines()
    dp = (pipeline / "forecast_dp.tsv").read_text(encoding="utf-8").splitlines()
    (tmp_path / "forecast_dp.tsv").write_text("\n".join(dp[:1] + sk[1:]) + "\n", encoding="utf-8")
    assert cli.main(["evaluate", *WINDOW, "--models", "skellam,dp", "--out", str(tmp_path)]) == cli.EXIT_OK
    rows = _tsv(tmp_path / "dm.tsv")
    assert rows
    for r in rows:
        assert r["note"] == "degenerate: identical losses"
        assert float(r["statistic"]) == 0.0
        assert r["stars"] == ""
    assert cli.main(["compare", *WINDOW, "--models", "skellam,dp", "--out", str(tmp_path)]) == cli.EXIT_OK
    rows = _tsv(tmp_path / "compare_skellam_dp.tsv")
    assert all(r["note"].startswith("degenerate") for r in rows)


def test_compare_needs_two_models(pipeline):
    assert cli.main(["compare", *WINDOW, "--out", str(pipeline)]) == cli.EXIT_USAGE


def test_heatmap_shape(pipeline, bundled):
    rows = _tsv(pipeline / "heatmap.tsv")
    assert list(rows[0]) == ["model", "age", "year", "rmse"]
    assert len(rows) == 3 * len(bundled.ages) * 15
    assert {int(r["year"]) for r in rows} == set(range(2001, 2016))
    assert all(float(r["rmse"]) >= 0 for r in rows)


def test_scatter_split_and_passthrough(pipeline, bundled):
    rows = _tsv(pipeline / "scatter.tsv")
    assert list(rows[0]) == ["model", "age", "year", "observed_gap", "fitted_or_forecast_gap", "phase"]
    ins = [int(r["year"]) for r in rows if r["phase"] == "in"]
    outs = [int(r["year"]) for r in rows if r["phase"] == "out"]
    assert max(ins) == 2000 and min(ins) == 1981
    assert min(outs) == 2001 and max(outs) == 2015
    gap = to_gap(bundled)
    for r in rows:
        i, j = gap.ages.index(r["age"]), gap.years.index(int(r["year"]))
        assert int(r["observed_gap"]) == gap.gaps[i, j]


def test_pipeline_is_byte_deterministic(pipeline, tmp_path):
    assert _run(tmp_path) == cli.EXIT_OK
    names = sorted(p.name for p in pipeline.iterdir() if not p.name.startswith("compare"))
    assert names == sorted(p.name for p in tmp_path.iterdir())
    for name in names:
        assert (pipeline / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_age_min_restricts_rows(tmp_path, bundled):
    assert _run(tmp_path, "--age-min", "40") == cli.EXIT_OK
    rows = _tsv(tmp_path / "heatmap.tsv")
    ages = {r["age"] for r in rows}
    assert "35-39" not in ages and "40-44" in ages
    assert len(rows) == 3 * len(ages) * 15


def test_simulate_from_spec(tmp_path):
    spec = Path(cli._data_path("bundled")).parent / "example_sim_spec.json"
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--spec", str(spec), "--out", str(a)]) == cli.EXIT_OK
    assert cli.main(["simulate", "--spec", str(spec), "--out", str(b)]) == cli.EXIT_OK
    assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
    cfg = json.loads(spec.read_text(encoding="utf-8"))
    panel = load_panel(a / "panel.csv")
    assert panel.shape == (cfg["ages"], cfg["years"])
    assert len(_tsv(a / "true_gap.tsv")) == cfg["ages"] * cfg["years"]
    c = tmp_path / "c"
    assert cli.main(["simulate", "--spec", str(spec), "--seed", "8", "--out", str(c)]) == cli.EXIT_OK
    assert (a / "panel.csv").read_bytes() != (c / "panel.csv").read_bytes()


def test_simulate_missing_spec_exit_1(tmp_path):
    assert cli.main(["simulate", "--spec", str(tmp_path / "x.json"), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_non_convergence_exit_2(tmp_path, monkeypatch):
    real = cli._config

    def starved(args, **kw):
        return replace(real(args, **kw), settings=OptimSettings(bfgs_max_iter=2, skellam_em_iter=0))

    monkeypatch.setattr(cli, "_config", starved)
    assert cli.main(["fit", *WINDOW, "--models", "skellam", "--out", str(tmp_path)]) == cli.EXIT_NONCONVERGED
    assert not read_fit(tmp_path / "fit_skellam.tsv").converged
