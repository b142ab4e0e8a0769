import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mortgap.design import (
    MAX_LOG_INTENSITY,
    AgePeriodParams,
    IntensityOverflowError,
    accumulate_gradient,
    block_size,
    format_params,
    intensity_surface,
    linear_predictor,
    n_effective,
    pack,
    parse_params,
    predictor_surface,
    unpack,
)

finite = st.floats(-5, 5, allow_nan=False)


@st.composite
def params(draw, max_ages=6, max_years=8):
    A = draw(st.integers(1, max_ages))
    T = draw(st.integers(1, max_years))
    return AgePeriodParams(
        draw(finite),
        draw(hnp.arrays(float, A - 1, elements=finite)),
        draw(hnp.arrays(float, T - 1, elements=finite)),
    )


def test_linear_predictor_examples():
    p = AgePeriodParams(1.0, [0.5], [0.3, -0.2])
    assert linear_predictor(p, 0, 0) == 1.0
    assert linear_predictor(p, 1, 2) == pytest.approx(1.3, abs=1e-15)
    z = AgePeriodParams.zeros(3, 4)
    assert all(linear_predictor(z, i, j) == 0.0 for i in range(3) for j in range(4))


def test_linear_predictor_index_errors():
    p = AgePeriodParams.zeros(2, 3)
    with pytest.raises(IndexError):
        linear_predictor(p, 2, 0)
    with pytest.raises(IndexError):
        linear_predictor(p, 0, -1)


def test_intensity_surface_examples():
    np.testing.assert_array_equal(intensity_surface(AgePeriodParams.zeros(2, 3)), np.ones((2, 3)))
    np.testing.assert_allclose(intensity_surface(AgePeriodParams.zeros(3, 2, math.log(100))), 100.0, rtol=1e-15)


def test_intensity_surface_3x3_hand_values():
    p = AgePeriodParams(0.2, [1.0, -0.5], [0.1, 0.7])
    age = [0.0, 1.0, -0.5]
    year = [0.0, 0.1, 0.7]
    expected = np.array([[math.exp(0.2 + a + t) for t in year] for a in age])
    np.testing.assert_allclose(intensity_surface(p, 3, 3), expected, rtol=1e-15)


def test_intensity_surface_overflow_names_cell():
    p = AgePeriodParams(690.0, [0.0, 20.0], [0.0])
    with pytest.raises(IntensityOverflowError, match=r"age 2, year 0"):
        intensity_surface(p)
    assert MAX_LOG_INTENSITY == 700.0


def test_intensity_surface_dimension_mismatch():
    with pytest.raises(ValueError):
        intensity_surface(AgePeriodParams.zeros(2, 3), 3, 3)


def test_params_must_be_finite():
    with pytest.raises(ValueError):
        AgePeriodParams(np.nan, [], [])
    with pytest.raises(ValueError):
        AgePeriodParams(0.0, [np.inf], [])


def test_pack_lengths():
    assert pack([AgePeriodParams.zeros(2, 3)]).size == 4
    A, T = 5, 7
    assert pack([AgePeriodParams.zeros(A, T)] * 2).size == 2 * (1 + (A - 1) + (T - 1))
    assert block_size(A, T) == 1 + (A - 1) + (T - 1)
    assert n_effective(A, T, 2, 1) == 2 * block_size(A, T) + 1


def test_unpack_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        unpack(np.zeros(5), 2, 3)


@given(params(), params(), st.lists(finite, max_size=2))
def test_pack_unpack_round_trip(p, q, extras):
    if (p.n_ages, p.n_years) != (q.n_ages, q.n_years):
        q = AgePeriodParams(q.intercept, np.zeros(p.n_ages - 1), np.zeros(p.n_years - 1))
    vec = pack([p, q], extras)
    blocks, ext = unpack(vec, p.n_ages, p.n_years, 2, len(extras))
    assert blocks[0] == p and blocks[1] == q
    np.testing.assert_array_equal(ext, extras)


@given(params())
def test_predictor_surface_matches_cellwise(p):
    surf = predictor_surface(p)
    for i in range(p.n_ages):
        for j in range(p.n_years):
            assert surf[i, j] == linear_predictor(p, i, j)


@given(params())
def test_accumulate_gradient_is_design_transpose(p):
    # the gradient accumulation equals X^T g for the explicit reference-coded design matrix
    A, T = p.n_ages, p.n_years
    rng = np.random.default_rng(A * 31 + T)
    g = rng.normal(size=(A, T))
    X = np.zeros((A * T, block_size(A, T)))
    for i in range(A):
        for j in range(T):
            row = i * T + j
            X[row, 0] = 1.0
            if i:
                X[row, i] = 1.0
            if j:
                X[row, A - 1 + j] = 1.0
    np.testing.assert_allclose(accumulate_gradient(g), X.T @ g.ravel(), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("A,T", [(1, 1), (2, 3), (4, 5), (6, 2)])
def test_reference_coding_is_injective(A, T):
    # finite-difference Jacobian of theta -> log surface has full column rank
    rng = np.random.default_rng(0)
    theta = rng.normal(size=block_size(A, T))
    h = 1e-6

    def f(th):
        (b,), _ = unpack(th, A, T)
        return np.log(intensity_surface(b)).ravel()

    J = np.column_stack([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    assert np.linalg.matrix_rank(J, tol=1e-6) == theta.size


def test_shift_between_intercept_and_age_effects_changes_surface():
    p = AgePeriodParams(1.0, [0.5, -0.3], [0.2])
    c = 0.7
    q = AgePeriodParams(p.intercept + c, p.age_effects - c, p.period_effects)
    diff = predictor_surface(q) - predictor_surface(p)
    np.testing.assert_allclose(diff[0], c)
    np.testing.assert_allclose(diff[1:], 0.0, atol=1e-15)


@given(params(), params())
def test_format_parse_round_trip(p, q):
    q = AgePeriodParams(q.intercept, np.resize(q.age_effects, p.n_ages - 1), np.resize(q.period_effects, p.n_years - 1))
    ages = [f"{5 * i}-{5 * i + 4}" for i in range(p.n_ages)]
    years = list(range(1990, 1990 + p.n_years))
    text = format_params([p, q], ["A", "B"], ages, years, {"lambda3": 3.25})
    assert text.splitlines()[0] == "block\tlabel\tvalue"
    blocks, extras, got_ages, got_years = parse_params(text)
    assert blocks["A"] == p and blocks["B"] == q
    assert extras == {"lambda3": 3.25}
    assert got_ages == ages[1:] and got_years == years[1:]
