import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mortgap.evaluation import (
    IN_SAMPLE_COLUMNS,
    OUT_OF_SAMPLE_COLUMNS,
    DmResult,
    EvalReport,
    Significance,
    default_age_groups,
    dm_by_age_group,
    dm_rows,
    dm_test,
    error_metrics,
    evaluate,
    format_dm_table,
    format_report_table,
    information_criteria,
    report_rows,
)
from mortgap.panel import GapPanel
from mortgap.sim import default_age_labels

# ---------------------------------------------------------------------------
# Information criteria


def test_ic_degenerate():
    ic = information_criteria(0.0, 0, 10)
    assert ic["AIC"] == 0.0 and ic["BIC"] == 0.0 and ic["AICc"] == 0.0


def test_ic_hand_example():
    ic = information_criteria(-100.0, 10, 100)
    assert ic["AIC"] == 220.0
    assert ic["AICc"] == pytest.approx(220.0 + 220.0 / 89.0, rel=1e-15)
    assert ic["BIC"] == pytest.approx(10 * math.log(100) + 200.0, rel=1e-15)


def test_ic_aicc_absent():
    assert information_criteria(-5.0, 9, 10)["AICc"] is None
    assert information_criteria(-5.0, 10, 10)["AICc"] is None


@given(ll=st.floats(-1e6, 0), n=st.integers(8, 5000), p=st.integers(0, 5000))
def test_ic_increase_in_p(ll, n, p):
    assume(n > p + 2)
    a, b = information_criteria(ll, p, n), information_criteria(ll, p + 1, n)
    assert b["AIC"] > a["AIC"] and b["BIC"] > a["BIC"] and b["AICc"] > a["AICc"]
    assert a["AICc"] >= a["AIC"]


# ---------------------------------------------------------------------------
# Error metrics


def test_metrics_three_point_example():
    m = error_metrics([10, 20, 30], [12, 18, 30])
    assert m["MAE"] == 4 / 3
    assert m["RMSE"] == math.sqrt(8 / 3)
    assert m["MAPE"] == pytest.approx((20 + 10 + 0) / 3, rel=1e-15)
    assert m["excluded"] == 0


def test_metrics_perfect():
    m = error_metrics([[3, -4], [0, 7]], [[3, -4], [0, 7]])
    assert m["RMSE"] == m["MAE"] == m["MAPE"] == 0.0


def test_metrics_zero_cell_excluded_from_mape_only():
    m = error_metrics([0, 10], [2, 11])
    assert m["excluded"] == 1
    assert m["MAE"] == 1.5
    assert m["MAPE"] == pytest.approx(10.0)
    assert error_metrics([0, 0.5], [1, 1])["MAPE"] is None


grids = hnp.arrays(float, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e4, 1e4))


@given(a=grids, data=st.data(), c=st.floats(0.01, 100))
def test_metrics_scale_equivariance(a, data, c):
    p = data.draw(hnp.arrays(float, a.shape, elements=st.floats(-1e4, 1e4)))
    # the MAPE guard is in count units, so it scales with the data
    m1 = error_metrics(a, p, mape_min_abs=1.0)
    m2 = error_metrics(c * a, c * p, mape_min_abs=c)
    assert m2["RMSE"] == pytest.approx(c * m1["RMSE"], rel=1e-9, abs=1e-300)
    assert m2["MAE"] == pytest.approx(c * m1["MAE"], rel=1e-9, abs=1e-300)
    if m1["MAPE"] is not None:
        assert m2["MAPE"] == pytest.approx(m1["MAPE"], rel=1e-9, abs=1e-12)


@given(a=grids, data=st.data())
def test_rmse_at_least_mae(a, data):
    p = data.draw(hnp.arrays(float, a.shape, elements=st.floats(-1e4, 1e4)))
    m = error_metrics(a, p)
    assert m["RMSE"] >= m["MAE"] * (1 - 1e-12)


# ---------------------------------------------------------------------------
# Diebold-Mariano


def test_dm_hand_example():
    r = dm_test([1, 2, 1, 3], [2, 2, 2, 2])
    # d = (-3, 0, -3, 5), mean -1/4, squared deviations sum to 42.75, s = 42.75 / 3
    expected = -0.25 / math.sqrt(14.25 / 4)
    assert r.statistic == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert r.p_value == pytest.approx(math.erfc(abs(expected) / math.sqrt(2)), rel=1e-12)
    assert r.n == 4
    assert r.significance is Significance.NONE


def test_dm_identical_losses():
    r = dm_test([1.0, -2.0, 3.0], [1.0, 2.0, -3.0])
    assert r.degenerate and r.statistic == 0.0 and r.p_value == 1.0
    assert "identical" in r.note
    assert r.stars == ""


def test_dm_constant_differential():
    r = dm_test([2.0] * 4, [1.0] * 4)
    assert r.degenerate
    assert r.statistic == math.inf
    assert math.isnan(r.p_value)
    assert "(+)" in r.note
    assert dm_test([1.0] * 4, [2.0] * 4).statistic == -math.inf


def test_dm_input_checks():
    with pytest.raises(ValueError):
        dm_test([1.0], [2.0])
    with pytest.raises(ValueError):
        dm_test([1.0, 2.0], [2.0])


@given(
    e1=hnp.arrays(float, st.integers(2, 40), elements=st.floats(-1e3, 1e3)),
    data=st.data(),
)
def test_dm_antisymmetry(e1, data):
    e2 = data.draw(hnp.arrays(float, e1.shape, elements=st.floats(-1e3, 1e3)))
    a, b = dm_test(e1, e2), dm_test(e2, e1)
    if math.isnan(a.statistic):
        assert math.isnan(b.statistic)
    else:
        assert a.statistic == -b.statistic or (a.statistic == 0 and b.statistic == 0)


@pytest.mark.parametrize(
    "p,stars", [(0.2, ""), (0.05, ""), (0.0499, "*"), (0.01, "*"), (0.0099, "**"), (0.001, "**"), (0.00099, "***")]
)
def test_significance_thresholds(p, stars):
    assert Significance.from_p(p).value == stars


def test_dm_result_validates_significance():
    with pytest.raises(ValueError):
        DmResult("0-4", 3.0, 0.2, 15, Significance.P01)


def test_dm_empirical_size():
    rng = np.random.default_rng(2024)
    N, reps = 15, 2000
    e1 = rng.normal(size=(reps, N))
    e2 = rng.normal(size=(reps, N))
    reject = sum(dm_test(a, b).p_value < 0.05 for a, b in zip(e1, e2))
    assert 0.03 <= reject / reps <= 0.07


def test_default_age_groups():
    groups = default_age_groups(default_age_labels(17))
    assert groups[0] == ("0-4", ["0-4"])
    assert groups[-1] == ("80+", ["80+"])
    single = default_age_groups([str(a) for a in range(0, 12)])
    assert [g for g, _ in single] == ["0-4", "5-9", "10-14"]
    assert single[1][1] == ["5", "6", "7", "8", "9"]


def _holdout(A=4, T=15, seed=0):
    rng = np.random.default_rng(seed)
    return GapPanel(default_age_labels(A), range(2001, 2001 + T), rng.integers(-100, 100, (A, T)))


def test_dm_by_age_group_identical_forecasts():
    g = _holdout()
    f = g.gaps + 3.0
    res = dm_by_age_group(g, f, f)
    assert len(res) == 4
    assert all(r.degenerate for r in res)


def test_dm_by_age_group_two_groups_sum_ages():
    g = _holdout()
    rng = np.random.default_rng(1)
    f1 = g.gaps + rng.normal(0, 5, g.shape)
    f2 = g.gaps + rng.normal(0, 7, g.shape)
    groups = [("young", ["0-4", "5-9"]), ("old", ["10-14", "15+"])]
    res = dm_by_age_group(g, f1, f2, groups)
    assert [r.age_group for r in res] == ["young", "old"]
    assert all(r.n == 15 for r in res)
    y = g.gaps[:2].sum(0)
    direct = dm_test(f1[:2].sum(0) - y, f2[:2].sum(0) - y)
    assert res[0].statistic == direct.statistic


def test_dm_by_age_group_empty_group_warns():
    g = _holdout()
    groups = [("all", list(g.ages)), ("none", ["90-94"])]
    with pytest.warns(UserWarning, match="no ages"):
        res = dm_by_age_group(g, g.gaps + 1.0, g.gaps - 2.0, groups)
    assert len(res) == 1


def test_dm_by_age_group_requires_partition():
    g = _holdout()
    with pytest.raises(ValueError, match="partition"):
        dm_by_age_group(g, g.gaps, g.gaps, [("a", ["0-4"])])


# ---------------------------------------------------------------------------
# Reports


def _report(name, shift, ll=-500.0, p=10):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    obs = rng.integers(1, 200, (3, 8)).astype(float)
    fut = rng.integers(1, 200, (3, 4)).astype(float)
    return evaluate(name, ll, p, obs.size, obs, obs + shift * rng.normal(size=obs.shape), fut, fut + 2 * shift)


def test_evaluate_contents():
    r = _report("dp", 3.0)
    assert set(r.in_sample) == {"log_lik", *IN_SAMPLE_COLUMNS}
    assert set(r.out_of_sample) == set(OUT_OF_SAMPLE_COLUMNS)
    assert r.in_sample["AICc"] >= r.in_sample["AIC"]
    assert r.out_of_sample["MAE"] == pytest.approx(6.0)
    assert r.cells_used == 24
    for part in (r.in_sample, r.out_of_sample):
        assert part["RMSE"] >= part["MAE"]


def test_eval_report_invariants():
    with pytest.raises(ValueError):
        EvalReport("x", {"AIC": 10.0, "AICc": 9.0})
    with pytest.raises(ValueError):
        EvalReport("x", {"MAE": -1.0})
    with pytest.raises(AssertionError):
        EvalReport("x", {"RMSE": 1.0, "MAE": 2.0})


def test_report_table_layout():
    reports = [_report("skellam", 1.0, -400.0), _report("dp", 5.0, -600.0), _report("bp", 3.0, -550.0, 11)]
    text = format_report_table(reports, title="test")
    lines = text.splitlines()
    assert lines[0] == "test"
    assert "In-Sample" in lines[1] and "Out-of-Sample" in lines[1]
    header = lines[2].replace("|", " ").split()
    assert header == ["Model", "BIC", "AIC", "AICc", "RMSE", "MAE", "MAPE", "RMSE", "MAE", "MAPE"]
    body = {ln.split()[0]: ln for ln in lines[4:]}
    # lowest BIC is skellam's, second is bp's
    assert body["skellam"].split("|")[1].split()[1] == "(1st)"
    assert "(2nd)" in body["bp"].split("|")[1].split("  ")[0] or "(2nd)" in body["bp"]


def test_report_rows_tidy():
    rows = report_rows([_report("dp", 2.0)], baseline="1961-2000", ages="all").splitlines()
    assert rows[0].split("\t") == ["baseline", "ages", "model", "phase", "metric", "value"]
    metrics = [r.split("\t")[4] for r in rows[1:]]
    assert metrics[:7] == ["log_lik", "BIC", "AIC", "AICc", "RMSE", "MAE", "MAPE"]
    assert metrics[7:10] == ["RMSE", "MAE", "MAPE"]


def test_dm_table_stars_and_legend():
    res = {
        "Skellam vs DP": [DmResult("0-4", -3.5, 0.0004, 15, Significance.P001), DmResult("5-9", 1.0, 0.3, 15)],
        "Skellam vs BP": [DmResult("0-4", 0.0, 1.0, 15, degenerate=True, note="degenerate: identical losses")],
    }
    text = format_dm_table(res)
    assert "-3.500***" in text
    assert "1.000 " in text or text.splitlines()[3].rstrip().split("|")[1].strip() == "1.000"
    assert "degenerate" in text
    assert text.rstrip().endswith("*** p < 0.001, ** p < 0.01, * p < 0.05 (two-sided)")
    rows = dm_rows(res, baseline="x").splitlines()
    assert rows[0].startswith("baseline\tcomparison\tage_group")
    assert len(rows) == 4
