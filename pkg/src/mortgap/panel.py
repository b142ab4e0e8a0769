"""Two-population age-period death-count panels.

Panels are rectangular ``ages x years`` grids of counts for two populations
(for example two causes of death). Age groups are opaque labels ordered by
the lower bound parsed from their leading digits, so ``"80+"`` needs no
special handling.
"""

from __future__ import annotations

import configparser
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "PanelError",
    "IncompletePanelError",
    "CauseConfigError",
    "DEFAULT_SCHEMA",
    "MortalityPanel",
    "GapPanel",
    "CauseGroupingConfig",
    "UnmatchedReport",
    "age_lower_bound",
    "parse_schema",
    "load_panel",
    "panel_to_frame",
    "write_panel_csv",
    "group_causes",
    "to_gap",
    "subset",
    "load_icd_config",
    "default_icd_config",
]


class PanelError(ValueError):
    """Invalid panel data or arguments."""


class IncompletePanelError(PanelError):
    """A required (age, year, population) cell is missing."""


class CauseConfigError(PanelError):
    """Malformed cause-grouping configuration."""


#: Logical field -> CSV column name.
DEFAULT_SCHEMA = {"age": "age", "year": "year", "population": "population", "count": "deaths"}

_LOWER_BOUND = re.compile(r"^\s*(\d+)")


def age_lower_bound(label: str) -> int:
    """Lower bound of an age-group label such as ``"0-4"``, ``"80+"`` or ``"1"``."""
    m = _LOWER_BOUND.match(str(label))
    if m is None:
        raise PanelError(f"cannot parse a lower bound from age label {label!r}")
    return int(m.group(1))


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_index(ages, years, shape):
    if len(ages) == 0 or len(years) == 0:
        raise PanelError("panel must have at least one age and one year")
    bounds = [age_lower_bound(a) for a in ages]
    if any(b1 >= b2 for b1, b2 in zip(bounds, bounds[1:])):
        raise PanelError(f"age groups must be strictly ordered by lower bound: {list(ages)}")
    if any(y2 - y1 != 1 for y1, y2 in zip(years, years[1:])):
        raise PanelError(f"years must be consecutive integers: {list(years)}")
    if shape != (len(ages), len(years)):
        raise PanelError(f"grid shape {shape} does not match {len(ages)} ages x {len(years)} years")


@dataclass(frozen=True, eq=False)
class MortalityPanel:
    """Death counts for two populations on a shared age-year grid."""

    ages: tuple
    years: tuple
    counts_a: np.ndarray
    counts_b: np.ndarray
    labels: tuple = ("A", "B")

    def __post_init__(self):
        object.__setattr__(self, "ages", tuple(str(a) for a in self.ages))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        for name in ("counts_a", "counts_b"):
            raw = np.asarray(getattr(self, name))
            if raw.dtype.kind == "f" and np.any(raw != np.round(raw)):
                raise PanelError(f"{name} must hold integer counts")
            grid = _readonly(raw, np.int64)
            _check_index(self.ages, self.years, grid.shape)
            if np.any(grid < 0):
                x, t = np.argwhere(grid < 0)[0]
                raise PanelError(f"negative count in {name} at age {self.ages[x]!r}, year {self.years[t]}")
            object.__setattr__(self, name, grid)
        if len(self.labels) != 2 or self.labels[0] == self.labels[1]:
            raise PanelError(f"need two distinct population labels, got {self.labels}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts_a.shape

    def swapped(self) -> "MortalityPanel":
        """The same panel with populations A and B exchanged."""
        return MortalityPanel(self.ages, self.years, self.counts_b, self.counts_a, self.labels[::-1])

    def __eq__(self, other):
        if not isinstance(other, MortalityPanel):
            return NotImplemented
        return (
            self.ages == other.ages
            and self.years == other.years
            and self.labels == other.labels
            and np.array_equal(self.counts_a, other.counts_a)
            and np.array_equal(self.counts_b, other.counts_b)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GapPanel:
    """Signed count differences on an age-year grid."""

    ages: tuple
    years: tuple
    gaps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ages", tuple(str(a) for a in self.ages))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        raw = np.asarray(self.gaps)
        if raw.dtype.kind == "f" and np.any(raw != np.round(raw)):
            raise PanelError("gaps must be integers")
        gaps = _readonly(raw, np.int64)
        _check_index(self.ages, self.years, gaps.shape)
        object.__setattr__(self, "gaps", gaps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.gaps.shape

    def negated(self) -> "GapPanel":
        return GapPanel(self.ages, self.years, -self.gaps)

    def __eq__(self, other):
        if not isinstance(other, GapPanel):
            return NotImplemented
        return self.ages == other.ages and self.years == other.years and np.array_equal(self.gaps, other.gaps)

    __hash__ = None


def to_gap(panel: MortalityPanel) -> GapPanel:
    """Cellwise ``counts_a - counts_b``."""
    return GapPanel(panel.ages, panel.years, panel.counts_a - panel.counts_b)


def subset(panel, age_min: str | None = None, year_range: Sequence[int] | None = None):
    """Contiguous sub-panel from ``age_min`` upwards within ``year_range``.

    Parameters
    ----------
    panel : MortalityPanel or GapPanel
    age_min : str, optional
        Keep age groups whose lower bound is at least that of ``age_min``
        (``"40"`` and ``"40-44"`` are equivalent).
    year_range : (int, int), optional
        Inclusive first and last year; must lie inside the panel.
    """
    ages = list(panel.ages)
    years = list(panel.years)
    age_sel = np.arange(len(ages))
    if age_min is not None:
        lo = age_lower_bound(age_min)
        bounds = np.array([age_lower_bound(a) for a in ages])
        if lo < bounds[0] or lo > bounds[-1]:
            raise PanelError(f"age_min {age_min!r} lies outside the panel ages {ages[0]!r}..{ages[-1]!r}")
        age_sel = np.flatnonzero(bounds >= lo)
    year_sel = np.arange(len(years))
    if year_range is not None:
        start, end = (int(v) for v in year_range)
        if start > end:
            raise PanelError(f"empty year range {start}..{end}")
        if start < years[0] or end > years[-1]:
            raise PanelError(f"year range {start}..{end} outside panel years {years[0]}..{years[-1]}")
        year_sel = np.arange(start - years[0], end - years[0] + 1)
    new_ages = [ages[i] for i in age_sel]
    new_years = [years[j] for j in year_sel]
    if isinstance(panel, GapPanel):
        return GapPanel(new_ages, new_years, panel.gaps[np.ix_(age_sel, year_sel)])
    return MortalityPanel(
        new_ages,
        new_years,
        panel.counts_a[np.ix_(age_sel, year_sel)],
        panel.counts_b[np.ix_(age_sel, year_sel)],
        panel.labels,
    )


# ---------------------------------------------------------------------------
# CSV ingestion


def parse_schema(schema: str | Path | Mapping[str, str] | None) -> dict[str, str]:
    """Resolve a schema mapping of logical fields to CSV columns.

    ``schema`` may be a mapping, a path to a JSON object, or an inline
    ``"age=AgeGroup,year=Year,..."`` string. Unspecified fields keep their
    ``DEFAULT_SCHEMA`` column names.
    """
    out = dict(DEFAULT_SCHEMA)
    if schema is None:
        return out
    if isinstance(schema, Mapping):
        given = dict(schema)
    elif Path(schema).is_file():
        given = json.loads(Path(schema).read_text(encoding="utf-8"))
    else:
        given = {}
        for item in str(schema).split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise PanelError(f"schema entry {item!r} is not of the form field=column")
            key, col = item.split("=", 1)
            given[key.strip()] = col.strip()
    unknown = set(given) - set(DEFAULT_SCHEMA)
    if unknown:
        raise PanelError(f"unknown schema fields {sorted(unknown)}; expected {sorted(DEFAULT_SCHEMA)}")
    out.update(given)
    return out


def _frame_to_panel(df: pd.DataFrame, labels: Sequence[str] | None) -> MortalityPanel:
    pops = list(dict.fromkeys(df["population"]))
    if labels is None:
        if len(pops) != 2:
            raise PanelError(f"expected exactly two populations, found {len(pops)}: {pops}")
        labels = pops
    else:
        labels = [str(s) for s in labels]
        extra = set(pops) - set(labels)
        if len(labels) != 2 or extra:
            raise PanelError(f"populations {pops} do not match requested labels {labels}")
    if np.any(df["count"] < 0):
        row = df[df["count"] < 0].iloc[0]
        raise PanelError(f"negative count at age {row['age']!r}, year {row['year']}, population {row['population']!r}")
    totals = df.groupby(["population", "age", "year"], sort=False)["count"].sum()
    ages = sorted(dict.fromkeys(df["age"]), key=age_lower_bound)
    years_present = sorted(set(int(y) for y in df["year"]))
    years = list(range(years_present[0], years_present[-1] + 1))
    grids = []
    for pop in labels:
        grid = np.empty((len(ages), len(years)), dtype=np.int64)
        for i, age in enumerate(ages):
            for j, year in enumerate(years):
                key = (pop, age, year)
                if key not in totals.index:
                    raise IncompletePanelError(
                        f"incomplete panel: no count for age {age!r}, year {year}, population {pop!r}"
                    )
                grid[i, j] = totals.loc[key]
        grids.append(grid)
    return MortalityPanel(ages, years, grids[0], grids[1], tuple(labels))


def load_panel(path, schema=None, labels: Sequence[str] | None = None) -> MortalityPanel:
    """Read a long-format CSV into a :class:`MortalityPanel`.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : mapping, path or str, optional
        Column names for the ``age``, ``year``, ``population`` and ``count``
        fields; see :func:`parse_schema`.
    labels : (str, str), optional
        Which population label is A and which is B. Defaults to order of
        first appearance.

    Notes
    -----
    Duplicate ``(age, year, population)`` rows are summed.
    """
    cols = parse_schema(schema)
    df = pd.read_csv(path, encoding="utf-8", dtype={cols["age"]: str, cols["population"]: str})
    missing = [c for c in cols.values() if c not in df.columns]
    if missing:
        raise PanelError(f"{path}: missing columns {missing}")
    df = df[[cols[k] for k in DEFAULT_SCHEMA]].copy()
    df.columns = list(DEFAULT_SCHEMA)
    if df.isna().any().any():
        raise PanelError(f"{path}: empty fields in required columns")
    counts = pd.to_numeric(df["count"])
    if np.any(counts != np.round(counts)):
        raise PanelError(f"{path}: counts must be integers")
    df["count"] = counts.astype(np.int64)
    df["year"] = pd.to_numeric(df["year"]).astype(np.int64)
    df["age"] = df["age"].str.strip()
    return _frame_to_panel(df, labels)


def panel_to_frame(panel: MortalityPanel, schema=None) -> pd.DataFrame:
    """Long-format frame (age, year, population, count) in panel order."""
    cols = parse_schema(schema)
    rows = []
    for pop, grid in zip(panel.labels, (panel.counts_a, panel.counts_b)):
        for i, age in enumerate(panel.ages):
            for j, year in enumerate(panel.years):
                rows.append((age, year, pop, int(grid[i, j])))
    return pd.DataFrame(rows, columns=[cols[k] for k in DEFAULT_SCHEMA])


def write_panel_csv(panel: MortalityPanel, path, schema=None) -> None:
    """Write a panel in the CSV layout read by :func:`load_panel`."""
    panel_to_frame(panel, schema).to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Cause grouping

# appended to range ends so that "C" covers "C50" and "I99" covers "I991"
_PREFIX_TOP = "\uffff"


@dataclass(frozen=True)
class CauseGroupingConfig:
    """ICD revision -> cause group -> list of inclusive ``(start, end)`` code ranges.

    A code matches a range when its leading characters fall between the
    bounds at the bounds' own length, so ranges name code prefixes: ``"C"``
    matches every code starting with C and ``"I00-I99"`` matches ``"I251"``.
    """

    ranges: Mapping[int, Mapping[str, tuple]]

    def __post_init__(self):
        clean: dict[int, dict[str, tuple]] = {}
        for rev, groups in self.ranges.items():
            rev = int(rev)
            clean[rev] = {}
            for cause, rs in groups.items():
                norm = []
                for start, end in rs:
                    start, end = start.strip().upper(), end.strip().upper()
                    if not start or not end or start > end:
                        raise CauseConfigError(f"ICD{rev} {cause}: malformed range {start}-{end}")
                    norm.append((start, end))
                clean[rev][cause] = tuple(norm)
            spans = sorted(
                (s, e + _PREFIX_TOP, cause) for cause, rs in clean[rev].items() for s, e in rs
            )
            for (s1, e1, c1), (s2, e2, c2) in zip(spans, spans[1:]):
                if s2 <= e1 and c1 != c2:
                    raise CauseConfigError(
                        f"ICD{rev}: range {s2}-{e2[:-1]} of {c2!r} overlaps {s1}-{e1[:-1]} of {c1!r}"
                    )
        object.__setattr__(self, "ranges", clean)

    def classify(self, revision: int, code: str) -> str | None:
        """Cause group for ``code`` under ``revision``, or ``None`` if unmatched."""
        try:
            groups = self.ranges[int(revision)]
        except KeyError:
            raise CauseConfigError(f"unknown ICD revision {revision!r}") from None
        code = str(code).strip().upper().replace(".", "")
        for cause, rs in groups.items():
            for start, end in rs:
                if start <= code <= end + _PREFIX_TOP:
                    return cause
        return None


def _parse_ranges(text: str) -> list[tuple[str, str]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        start, _, end = item.partition("-")
        out.append((start, end or start))
    return out


def load_icd_config(source) -> CauseGroupingConfig:
    """Read a cause-grouping config.

    The format is INI-like: one ``[ICD<n>]`` section per revision, one key
    per cause group, values are comma-separated codes or ``start-end``
    ranges. ``source`` is a path or the config text itself.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if isinstance(source, Path) or "\n" not in str(source):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = str(source)
    parser.read_string(text)
    ranges = {}
    for section in parser.sections():
        m = re.fullmatch(r"ICD\s*(\d+)", section.strip(), flags=re.IGNORECASE)
        if m is None:
            raise CauseConfigError(f"section {section!r} is not of the form ICD<revision>")
        ranges[int(m.group(1))] = {k: _parse_ranges(v) for k, v in parser[section].items()}
    return CauseGroupingConfig(ranges)


def default_icd_config() -> CauseGroupingConfig:
    """The bundled cancer / circulatory grouping for ICD revisions 7 to 10."""
    text = resources.files("mortgap").joinpath("data/icd_groups.ini").read_text(encoding="utf-8")
    return load_icd_config(text)


@dataclass(frozen=True)
class UnmatchedReport:
    """Tally of records that belonged to neither requested cause group."""

    n_records: int
    n_matched: int
    n_unmatched: int
    deaths_unmatched: int
    by_code: dict = field(default_factory=dict)


def group_causes(
    records: pd.DataFrame | Iterable[Mapping],
    config: CauseGroupingConfig,
    cause_a: str,
    cause_b: str,
) -> tuple[MortalityPanel, UnmatchedReport]:
    """Aggregate cause-coded records into a two-population panel.

    Parameters
    ----------
    records : DataFrame or iterable of mappings
        Fields ``revision``, ``code``, ``age``, ``year``, ``count``.
    config : CauseGroupingConfig
    cause_a, cause_b : str
        Cause-group names that become populations A and B.

    Returns
    -------
    panel : MortalityPanel
    report : UnmatchedReport
        Records in any other group or in no group are tallied here.
    """
    df = pd.DataFrame(records)
    needed = ["revision", "code", "age", "year", "count"]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise PanelError(f"records lack fields {missing}")
    causes = [config.classify(r, c) for r, c in zip(df["revision"], df["code"])]
    df = df.assign(cause=causes)
    keep = df["cause"].isin([cause_a, cause_b])
    dropped = df[~keep]
    by_code = Counter()
    for code, n in zip(dropped["code"], dropped["count"]):
        by_code[str(code)] += int(n)
    report = UnmatchedReport(
        n_records=len(df),
        n_matched=int(keep.sum()),
        n_unmatched=int((~keep).sum()),
        deaths_unmatched=int(dropped["count"].sum()),
        by_code=dict(by_code),
    )
    matched = df[keep].rename(columns={"cause": "population"})[["age", "year", "population", "count"]]
    matched = matched.assign(
        age=matched["age"].astype(str).str.strip(),
        year=matched["year"].astype(np.int64),
        count=matched["count"].astype(np.int64),
    )
    if matched.empty:
        raise PanelError(f"no records matched {cause_a!r} or {cause_b!r}")
    return _frame_to_panel(matched, (cause_a, cause_b)), report
