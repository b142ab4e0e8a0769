import math

import mpmath
import numpy as np
import pytest
from scipy import stats

from mortgap.design import AgePeriodParams
from mortgap.dist import log_bivariate_poisson_pmf, log_poisson_pmf, log_skellam_pmf
from mortgap.panel import load_panel, to_gap
from mortgap.sim import (
    BUNDLED_SEED,
    Family,
    OracleTruncationError,
    SimSpec,
    bessel_series_oracle,
    bundled_synthetic_panel,
    convolution_oracle_skellam,
    enumeration_oracle_bp,
    load_sim_spec,
    simulate_counts,
    simulate_panel,
)

try:
    from importlib import resources
except ImportError:  # pragma: no cover
    resources = None


def _spec(lambda3=0.0, family=Family.BIVARIATE_POISSON, seed=4):
    blocks = (AgePeriodParams(math.log(6.0), [0.4, -0.3], [0.1, 0.2, -0.1]), AgePeriodParams(math.log(3.0), [-0.2, 0.5], [0.0, 0.3, 0.1]))
    return SimSpec(3, 4, blocks, lambda3=lambda3, seed=seed, family=family)


def test_simulation_is_deterministic():
    a = simulate_panel(_spec(2.0))
    b = simulate_panel(_spec(2.0))
    assert a[0] == b[0] and a[1] == b[1]
    assert not simulate_panel(_spec(2.0, seed=5))[0] == a[0]


def test_gap_is_difference_of_shared_draws():
    panel, gap = simulate_panel(_spec(4.0))
    np.testing.assert_array_equal(gap.gaps, panel.counts_a - panel.counts_b)


def test_replicate_means_within_4_sigma():
    spec = _spec(1.5)
    n = 10_000
    a, b = simulate_counts(spec, replicates=n)
    la, lb = spec.intensities()
    for draws, mean in ((a, la + 1.5), (b, lb + 1.5)):
        z = (draws.mean(axis=0) - mean) / np.sqrt(mean / n)
        assert np.all(np.abs(z) < 4)


def test_zero_common_rate_matches_double_poisson_law():
    # chi-square goodness of fit of the joint (x, y) table at one cell
    l1, l2 = 2.0, 3.0
    spec = SimSpec(1, 1, (AgePeriodParams(math.log(l1), [], []), AgePeriodParams(math.log(l2), [], [])), lambda3=0.0, seed=8)
    n = 100_000
    a, b = simulate_counts(spec, n)
    x, y = a.ravel(), b.ravel()
    K = 8
    xs, ys = np.minimum(x, K), np.minimum(y, K)
    obs = np.zeros((K + 1, K + 1))
    np.add.at(obs, (xs, ys), 1)
    px = np.exp(log_poisson_pmf(np.arange(K), l1))
    py = np.exp(log_poisson_pmf(np.arange(K), l2))
    px = np.append(px, 1 - px.sum())
    py = np.append(py, 1 - py.sum())
    exp = n * np.outer(px, py)
    keep = exp > 5
    chi2 = ((obs - exp)[keep] ** 2 / exp[keep]).sum()
    dof = keep.sum() - 1
    assert stats.chi2.sf(chi2, dof) > 1e-3


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(2.0, family=Family.SKELLAM)
    with pytest.raises(ValueError):
        SimSpec(2, 4, _spec().params)


def test_load_sim_spec_bundled_example():
    path = resources.files("mortgap").joinpath("data/example_sim_spec.json")
    spec = load_sim_spec(path)
    assert spec.ages == 6 and spec.years == 30
    assert spec.family is Family.BIVARIATE_POISSON
    panel, _ = simulate_panel(spec)
    assert panel.shape == (6, 30)


def test_bundled_panel_matches_shipped_csv():
    path = resources.files("mortgap").joinpath("data/synthetic_panel.csv")
    shipped = load_panel(path, labels=("Cancer", "Circulatory"))
    assert shipped == bundled_synthetic_panel()
    assert shipped.years[0] == 1960 and shipped.years[-1] == 2015
    assert shipped.ages[0] == "0-4" and shipped.ages[-1] == "80+"
    assert BUNDLED_SEED == 20240611


# ---------------------------------------------------------------------------
# Oracles


def test_skellam_oracle_series_identity():
    # e^-2 sum_k 1 / (k!)^2
    ref = math.exp(-2) * math.fsum(1 / math.factorial(k) ** 2 for k in range(40))
    assert convolution_oracle_skellam(0, 1.0, 1.0) == pytest.approx(ref, rel=1e-15)


def test_oracles_match_kernels_on_random_grid():
    rng = np.random.default_rng(50)
    for _ in range(50):
        l1, l2 = rng.uniform(0.5, 50, 2)
        z = int(rng.integers(-40, 41))
        assert math.exp(log_skellam_pmf(z, l1, l2)) == pytest.approx(convolution_oracle_skellam(z, l1, l2), abs=1e-10)
        x, y = (int(v) for v in rng.integers(0, 60, 2))
        l3 = rng.uniform(0, 20)
        assert math.exp(log_bivariate_poisson_pmf(x, y, l1, l2, l3)) == pytest.approx(
            enumeration_oracle_bp(x, y, l1, l2, l3), abs=1e-10
        )


def test_bp_oracle_marginal():
    l1, l2, l3 = 1.5, 2.5, 0.75
    for x in range(6):
        marg = math.fsum(enumeration_oracle_bp(x, y, l1, l2, l3) for y in range(80))
        assert marg == pytest.approx(math.exp(log_poisson_pmf(x, l1 + l3)), abs=1e-10)


def test_oracle_refuses_short_truncation():
    with pytest.raises(OracleTruncationError):
        convolution_oracle_skellam(0, 30.0, 30.0, k_max=20)


def test_bessel_oracle_small_values():
    assert bessel_series_oracle(0, 1e-12) == pytest.approx(0.0, abs=1e-20)
    with mpmath.workdps(30):
        ref = float(mpmath.log(mpmath.besseli(1, 2)))
    assert bessel_series_oracle(1, 2.0) == pytest.approx(ref, rel=1e-15)
