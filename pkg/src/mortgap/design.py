"""Age-period parameterisation under reference-cell identification.

A single intensity series on an ``A x T`` grid is

    log lambda[x, t] = intercept + age[x] + period[t]

with ``age[0] = period[0] = 0`` implicit. Flat parameter vectors stack one
block ``[intercept, age[1:], period[1:]]`` per series, followed by any
scalar extras (the bivariate Poisson log common rate).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "MAX_LOG_INTENSITY",
    "IntensityOverflowError",
    "AgePeriodParams",
    "block_size",
    "n_effective",
    "linear_predictor",
    "predictor_surface",
    "intensity_surface",
    "accumulate_gradient",
    "pack",
    "unpack",
    "format_params",
    "parse_params",
]

#: Largest linear predictor accepted before exponentiation.
MAX_LOG_INTENSITY = 700.0


class IntensityOverflowError(OverflowError):
    """Raised when a linear predictor is too large to exponentiate."""


@dataclass(frozen=True)
class AgePeriodParams:
    """Intercept, non-reference age effects and non-reference period effects."""

    intercept: float
    age_effects: np.ndarray
    period_effects: np.ndarray

    def __post_init__(self):
        age = np.array(self.age_effects, dtype=float).reshape(-1)
        period = np.array(self.period_effects, dtype=float).reshape(-1)
        age.setflags(write=False)
        period.setflags(write=False)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "age_effects", age)
        object.__setattr__(self, "period_effects", period)
        if not (np.isfinite(self.intercept) and np.all(np.isfinite(age)) and np.all(np.isfinite(period))):
            raise ValueError("age-period parameters must be finite")

    @property
    def n_ages(self) -> int:
        return self.age_effects.size + 1

    @property
    def n_years(self) -> int:
        return self.period_effects.size + 1

    @classmethod
    def zeros(cls, n_ages: int, n_years: int, intercept: float = 0.0) -> "AgePeriodParams":
        return cls(intercept, np.zeros(n_ages - 1), np.zeros(n_years - 1))

    def full_age(self) -> np.ndarray:
        """Age effects with the reference age's 0 prepended."""
        return np.concatenate(([0.0], self.age_effects))

    def full_period(self) -> np.ndarray:
        """Period effects with the reference year's 0 prepended."""
        return np.concatenate(([0.0], self.period_effects))

    def __eq__(self, other):
        if not isinstance(other, AgePeriodParams):
            return NotImplemented
        return (
            self.intercept == other.intercept
            and np.array_equal(self.age_effects, other.age_effects)
            and np.array_equal(self.period_effects, other.period_effects)
        )

    __hash__ = None


def block_size(n_ages: int, n_years: int) -> int:
    """Number of free parameters in one age-period block."""
    return 1 + (n_ages - 1) + (n_years - 1)


def n_effective(n_ages: int, n_years: int, n_blocks: int = 1, n_extras: int = 0) -> int:
    """Effective parameter count for ``n_blocks`` series plus scalar extras."""
    return n_blocks * block_size(n_ages, n_years) + n_extras


def linear_predictor(params: AgePeriodParams, age_index: int, year_index: int) -> float:
    """``intercept + age[age_index] + period[year_index]`` for one cell."""
    if not 0 <= age_index < params.n_ages:
        raise IndexError(f"age index {age_index} outside 0..{params.n_ages - 1}")
    if not 0 <= year_index < params.n_years:
        raise IndexError(f"year index {year_index} outside 0..{params.n_years - 1}")
    age = params.age_effects[age_index - 1] if age_index else 0.0
    period = params.period_effects[year_index - 1] if year_index else 0.0
    return params.intercept + age + period


def predictor_surface(params: AgePeriodParams) -> np.ndarray:
    """Linear predictor on the full ``A x T`` grid."""
    return params.intercept + params.full_age()[:, None] + params.full_period()[None, :]


def intensity_surface(params: AgePeriodParams, n_ages: int | None = None, n_years: int | None = None) -> np.ndarray:
    """``exp`` of the linear predictor on the full grid.

    Raises
    ------
    ValueError
        If the requested dimensions differ from the parameter block.
    IntensityOverflowError
        If any linear predictor exceeds ``MAX_LOG_INTENSITY``; the message
        names the first offending cell.
    """
    if n_ages is not None and n_ages != params.n_ages:
        raise ValueError(f"params describe {params.n_ages} ages, not {n_ages}")
    if n_years is not None and n_years != params.n_years:
        raise ValueError(f"params describe {params.n_years} years, not {n_years}")
    eta = predictor_surface(params)
    _check_overflow(eta)
    return np.exp(eta)


def _check_overflow(eta):
    over = eta > MAX_LOG_INTENSITY
    if np.any(over):
        x, t = np.argwhere(over)[0]
        raise IntensityOverflowError(
            f"linear predictor {eta[x, t]:.6g} at cell (age {x}, year {t}) exceeds {MAX_LOG_INTENSITY}"
        )


def accumulate_gradient(cell_grad: np.ndarray) -> np.ndarray:
    """Chain a per-cell derivative in the linear predictor to one block.

    Parameters
    ----------
    cell_grad : ndarray, shape (A, T)
        Derivative of the objective with respect to each cell's predictor.

    Returns
    -------
    ndarray, shape (block_size(A, T),)
    """
    cell_grad = np.asarray(cell_grad, dtype=float)
    return np.concatenate(([cell_grad.sum()], cell_grad.sum(axis=1)[1:], cell_grad.sum(axis=0)[1:]))


def pack(blocks: Sequence[AgePeriodParams], extras: Sequence[float] = ()) -> np.ndarray:
    """Flatten parameter blocks and trailing scalar extras into one vector."""
    parts = [np.concatenate(([b.intercept], b.age_effects, b.period_effects)) for b in blocks]
    parts.append(np.asarray(extras, dtype=float).reshape(-1))
    return np.concatenate(parts)


def unpack(vector, n_ages: int, n_years: int, n_blocks: int = 1, n_extras: int = 0):
    """Inverse of :func:`pack`.

    Returns
    -------
    blocks : list of AgePeriodParams
    extras : ndarray
    """
    vector = np.asarray(vector, dtype=float).reshape(-1)
    size = block_size(n_ages, n_years)
    expected = n_blocks * size + n_extras
    if vector.size != expected:
        raise ValueError(f"parameter vector has length {vector.size}, expected {expected}")
    blocks = []
    for b in range(n_blocks):
        chunk = vector[b * size:(b + 1) * size]
        blocks.append(AgePeriodParams(chunk[0], chunk[1:n_ages], chunk[n_ages:]))
    return blocks, vector[n_blocks * size:].copy()


def format_params(
    blocks: Sequence[AgePeriodParams],
    block_names: Sequence[str],
    ages: Sequence[str],
    years: Sequence[int],
    extras: dict[str, float] | None = None,
) -> str:
    """Render parameters as tab-separated ``block, label, value`` rows.

    Values use ``repr`` so that parsing recovers them bit for bit.
    """
    out = io.StringIO()
    out.write("block\tlabel\tvalue\n")
    for name, p in zip(block_names, blocks):
        out.write(f"{name}\tintercept\t{p.intercept!r}\n")
        for label, val in zip(ages[1:], p.age_effects):
            out.write(f"{name}\tage:{label}\t{float(val)!r}\n")
        for year, val in zip(years[1:], p.period_effects):
            out.write(f"{name}\tyear:{int(year)}\t{float(val)!r}\n")
    for label, val in (extras or {}).items():
        out.write(f"extra\t{label}\t{float(val)!r}\n")
    return out.getvalue()


def parse_params(text: str):
    """Parse :func:`format_params` output.

    Returns
    -------
    blocks : dict of str to AgePeriodParams
    extras : dict of str to float
    ages, years : list
        Non-reference age labels and years, in file order.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split("\t") != ["block", "label", "value"]:
        raise ValueError("parameter table must start with a 'block\\tlabel\\tvalue' header")
    raw: dict[str, dict] = {}
    extras: dict[str, float] = {}
    for ln in lines[1:]:
        block, label, value = ln.split("\t")
        if block == "extra":
            extras[label] = float(value)
            continue
        entry = raw.setdefault(block, {"intercept": None, "age": [], "year": []})
        if label == "intercept":
            entry["intercept"] = float(value)
        elif label.startswith("age:"):
            entry["age"].append((label[4:], float(value)))
        elif label.startswith("year:"):
            entry["year"].append((int(label[5:]), float(value)))
        else:
            raise ValueError(f"unrecognised parameter label {label!r}")
    blocks = {}
    ages: list = []
    years: list = []
    for name, entry in raw.items():
        if entry["intercept"] is None:
            raise ValueError(f"block {name!r} has no intercept")
        blocks[name] = AgePeriodParams(
            entry["intercept"], [v for _, v in entry["age"]], [v for _, v in entry["year"]]
        )
        ages = [a for a, _ in entry["age"]]
        years = [y for y, _ in entry["year"]]
    return blocks, extras, ages, years
