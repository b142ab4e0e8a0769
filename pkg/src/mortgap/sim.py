"""Synthetic panels and brute-force reference probabilities.

Panels are sampled cell by cell from per-cell substreams
``PCG64(SeedSequence([seed, age_index, year_index]))``, so a cell's draws do
not depend on the panel size or on evaluation order.

The oracles sum probabilities directly in extended precision (mpmath) and
share no code with :mod:`mortgap.dist`.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import mpmath
import numpy as np

from .design import AgePeriodParams, intensity_surface
from .dist import sample_poisson
from .panel import GapPanel, MortalityPanel, to_gap

__all__ = [
    "Family",
    "SimSpec",
    "OracleTruncationError",
    "cell_rng",
    "simulate_counts",
    "simulate_panel",
    "simulate_from_surfaces",
    "bundled_synthetic_surfaces",
    "bundled_synthetic_panel",
    "BUNDLED_SEED",
    "load_sim_spec",
    "default_age_labels",
    "convolution_oracle_skellam",
    "enumeration_oracle_bp",
    "bessel_series_oracle",
]


class Family(str, enum.Enum):
    DOUBLE_POISSON = "dp"
    BIVARIATE_POISSON = "bp"
    SKELLAM = "skellam"


class OracleTruncationError(ValueError):
    """The requested truncation point leaves too much probability mass."""


def default_age_labels(n_ages: int) -> list[str]:
    """Five-year labels ``"0-4", "5-9", ...`` with an open last group."""
    labels = [f"{5 * i}-{5 * i + 4}" for i in range(n_ages - 1)]
    labels.append(f"{5 * (n_ages - 1)}+")
    return labels if n_ages > 1 else ["0+"]


@dataclass(frozen=True)
class SimSpec:
    """Generating model for a synthetic panel.

    Attributes
    ----------
    ages, years : int
        Grid dimensions.
    params : (AgePeriodParams, AgePeriodParams)
        Log-intensity blocks of the two series (A/B, or C/D for Skellam).
        For the bivariate Poisson family these are the non-shared rates.
    lambda3 : float
        Common rate (bivariate Poisson only).
    seed : int
    family : Family
    first_year : int
    age_labels : tuple of str, optional
    labels : (str, str)
    """

    ages: int
    years: int
    params: tuple
    lambda3: float = 0.0
    seed: int = 0
    family: Family = Family.BIVARIATE_POISSON
    first_year: int = 2000
    age_labels: tuple | None = None
    labels: tuple = ("A", "B")

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.ages < 1 or self.years < 1:
            raise ValueError("panel dimensions must be positive")
        if len(self.params) != 2:
            raise ValueError("need two parameter blocks")
        for p in self.params:
            if (p.n_ages, p.n_years) != (self.ages, self.years):
                raise ValueError(f"parameter block is {p.n_ages}x{p.n_years}, spec is {self.ages}x{self.years}")
        if self.lambda3 < 0 or not np.isfinite(self.lambda3):
            raise ValueError("lambda3 must be finite and nonnegative")
        if self.lambda3 > 0 and self.family is not Family.BIVARIATE_POISSON:
            raise ValueError("lambda3 applies to the bivariate Poisson family only")
        if self.age_labels is not None and len(self.age_labels) != self.ages:
            raise ValueError("age_labels length must equal ages")

    @property
    def year_list(self) -> list[int]:
        return list(range(self.first_year, self.first_year + self.years))

    @property
    def age_list(self) -> list[str]:
        return list(self.age_labels) if self.age_labels is not None else default_age_labels(self.ages)

    def intensities(self) -> tuple[np.ndarray, np.ndarray]:
        return intensity_surface(self.params[0]), intensity_surface(self.params[1])

    def true_gap(self) -> np.ndarray:
        """Expected gap surface ``lambda_1 - lambda_2``."""
        la, lb = self.intensities()
        return la - lb


def cell_rng(seed: int, age_index: int, year_index: int) -> np.random.Generator:
    """Independent generator for one cell."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, age_index, year_index])))


def _draw(la, lb, lambda3, seed, replicates):
    A, T = la.shape
    out_a = np.empty((replicates, A, T), dtype=np.int64)
    out_b = np.empty_like(out_a)
    for i in range(A):
        for j in range(T):
            rng = cell_rng(seed, i, j)
            x1 = sample_poisson(np.full(replicates, la[i, j]), rng)
            x2 = sample_poisson(np.full(replicates, lb[i, j]), rng)
            x3 = sample_poisson(np.full(replicates, lambda3), rng) if lambda3 > 0 else 0
            out_a[:, i, j] = x1 + x3
            out_b[:, i, j] = x2 + x3
    return out_a, out_b


def simulate_counts(spec: SimSpec, replicates: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``replicates`` count pairs per cell.

    Returns
    -------
    counts_a, counts_b : ndarray of int64, shape (replicates, ages, years)
    """
    la, lb = spec.intensities()
    lam3 = spec.lambda3 if spec.family is Family.BIVARIATE_POISSON else 0.0
    return _draw(la, lb, lam3, spec.seed, replicates)


def simulate_from_surfaces(ages, years, lam1, lam2, lambda3=0.0, seed=0, labels=("A", "B")) -> MortalityPanel:
    """Bivariate Poisson panel from arbitrary (not necessarily age-period) rate surfaces.

    ``lam1`` and ``lam2`` are the non-shared rates; the marginal means are
    ``lam1 + lambda3`` and ``lam2 + lambda3``.
    """
    lam1 = np.asarray(lam1, dtype=float)
    lam2 = np.asarray(lam2, dtype=float)
    if lam1.shape != (len(ages), len(years)) or lam2.shape != lam1.shape:
        raise ValueError("rate surfaces must have shape (ages, years)")
    if np.any(lam1 < 0) or np.any(lam2 < 0) or lambda3 < 0:
        raise ValueError("rates must be nonnegative")
    a, b = _draw(lam1, lam2, float(lambda3), seed, 1)
    return MortalityPanel(list(ages), list(years), a[0], b[0], labels)


def simulate_panel(spec: SimSpec) -> tuple[MortalityPanel, GapPanel]:
    """One reproducible panel and its gap panel."""
    a, b = simulate_counts(spec, 1)
    panel = MortalityPanel(spec.age_list, spec.year_list, a[0], b[0], spec.labels)
    return panel, to_gap(panel)


BUNDLED_SEED = 20240611


def bundled_synthetic_surfaces():
    """Rate surfaces behind the bundled synthetic panel.

    Seventeen five-year age groups (0-4 .. 80+) over 1960-2015. Series A
    rises with age as a bell around 75 and grows over time at older ages;
    series B rises exponentially with age and declines over time, faster at
    older ages. Both carry mild non-additive age-period terms, so neither
    series, nor their gap, is exactly age-period. The common rate is 25.

    Returns
    -------
    ages, years, lam1, lam2, lambda3
        ``lam1`` and ``lam2`` are the non-shared rates.
    """
    ages = default_age_labels(17)
    years = list(range(1960, 2016))
    x = 2.5 + 5.0 * np.arange(17)[:, None]
    t = (np.arange(1960, 2016)[None, :] - 1960) / 55.0
    mean_a = 60.0 + 9000.0 * np.exp(-(((x - 75.0) / 20.0) ** 2)) * np.exp(0.35 * t * np.clip((x - 30.0) / 50.0, 0.0, 1.0))
    mean_b = 60.0 + 16000.0 * np.exp(0.085 * (x - 82.5)) * np.exp(-(0.2 + 0.6 * x / 82.5) * t)
    # smooth gap trend that no additive age-period surface reproduces
    mean_a = mean_a * (1.0 + 0.08 * np.sin(np.pi * t) * np.cos(np.pi * x / 82.5))
    lambda3 = 25.0
    return ages, years, mean_a - lambda3, mean_b - lambda3, lambda3


def bundled_synthetic_panel() -> MortalityPanel:
    """Regenerate the bundled synthetic panel (labels ``Cancer``, ``Circulatory``)."""
    ages, years, l1, l2, l3 = bundled_synthetic_surfaces()
    return simulate_from_surfaces(ages, years, l1, l2, l3, BUNDLED_SEED, ("Cancer", "Circulatory"))


def load_sim_spec(path) -> SimSpec:
    """Read a :class:`SimSpec` from JSON.

    The file holds ``ages``, ``years``, ``family``, ``seed`` and optionally
    ``first_year``, ``lambda3``, ``age_labels``, ``labels``. Each series is
    given under ``series`` as a list of two objects with ``intercept``,
    ``age_effects`` (length ``ages - 1``) and either ``period_effects``
    (length ``years - 1``) or a linear ``period_slope``.
    """
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    ages, years = int(cfg["ages"]), int(cfg["years"])
    blocks = []
    for s in cfg["series"]:
        if "period_effects" in s:
            period = s["period_effects"]
        else:
            period = float(s.get("period_slope", 0.0)) * np.arange(1, years)
        age = s.get("age_effects", [0.0] * (ages - 1))
        blocks.append(AgePeriodParams(s["intercept"], age, period))
    return SimSpec(
        ages=ages,
        years=years,
        params=tuple(blocks),
        lambda3=float(cfg.get("lambda3", 0.0)),
        seed=int(cfg.get("seed", 0)),
        family=cfg.get("family", "bp"),
        first_year=int(cfg.get("first_year", 2000)),
        age_labels=tuple(cfg["age_labels"]) if "age_labels" in cfg else None,
        labels=tuple(cfg.get("labels", ("A", "B"))),
    )


# ---------------------------------------------------------------------------
# Oracles

_ORACLE_DPS = 40
_TAIL_BOUND = 1e-14


def _pois(k, lam):
    return mpmath.exp(-lam + k * mpmath.log(lam) - mpmath.loggamma(k + 1)) if lam > 0 else mpmath.mpf(k == 0)


def _poisson_tail(k, lam):
    # P(X > k) = regularized lower gamma P(k + 1, lam)
    return mpmath.gammainc(k + 1, 0, lam, regularized=True)


def convolution_oracle_skellam(z: int, lam1: float, lam2: float, k_max: int | None = None) -> float:
    """``P(X1 - X2 = z)`` by direct summation of ``Pois(k + z; lam1) Pois(k; lam2)``.

    Parameters
    ----------
    k_max : int, optional
        Last summation index. By default chosen so that the neglected mass
        is below 1e-14.

    Raises
    ------
    OracleTruncationError
        If the mass beyond ``k_max`` is not below 1e-14.
    """
    z = int(z)
    with mpmath.workdps(_ORACLE_DPS):
        l1, l2 = mpmath.mpf(lam1), mpmath.mpf(lam2)
        if z < 0:
            z, l1, l2 = -z, l2, l1
        if k_max is None:
            k_max = int(float(l2) + 40.0 * float(mpmath.sqrt(l2)) + 60)
        # every neglected term is bounded by Pois(k; l2) for k > k_max
        tail = _poisson_tail(k_max, l2)
        if tail >= _TAIL_BOUND:
            raise OracleTruncationError(f"mass {float(tail):.3g} beyond k_max={k_max} exceeds {_TAIL_BOUND}")
        total = mpmath.fsum(_pois(k + z, l1) * _pois(k, l2) for k in range(k_max + 1))
        return float(total)


def enumeration_oracle_bp(x: int, y: int, lam1: float, lam2: float, lam3: float) -> float:
    """``P(X1 + X3 = x, X2 + X3 = y)`` by enumerating the common component."""
    x, y = int(x), int(y)
    with mpmath.workdps(_ORACLE_DPS):
        l1, l2, l3 = mpmath.mpf(lam1), mpmath.mpf(lam2), mpmath.mpf(lam3)
        total = mpmath.fsum(_pois(x - k, l1) * _pois(y - k, l2) * _pois(k, l3) for k in range(min(x, y) + 1))
        return float(total)


def bessel_series_oracle(n: int, v: float, dps: int = _ORACLE_DPS) -> float:
    """``log I_n(v)`` from the ascending series in extended precision."""
    n = int(n)
    with mpmath.workdps(dps):
        v = mpmath.mpf(v)
        q = (v / 2) ** 2
        term = (v / 2) ** n / mpmath.factorial(n)
        total = term
        k = 0
        eps = mpmath.mpf(10) ** (-dps)
        mode = (mpmath.sqrt(n * n + v * v) - n) / 2
        while k <= mode or term > eps * total:
            term = term * q / ((k + 1) * (n + k + 1))
            total += term
            k += 1
        return float(mpmath.log(total))
