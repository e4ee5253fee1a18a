"""Regional panel loading, windowing, and chronological splitting.

A panel is a dense (time x region) matrix of surveillance values on a
regular daily or weekly calendar. Supervised samples pair a lookback
window of the most recent observations with a single future target.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .validation import freeze

FREQUENCIES = ("daily", "weekly")

_STEPS = {"daily": timedelta(days=1), "weekly": timedelta(days=7)}

# Calendar indicator cardinality: day-of-week for daily panels, ISO
# week-of-year for weekly panels.
CALENDAR_CATEGORIES = {"daily": 7, "weekly": 53}


def frequency_step(frequency: str) -> timedelta:
    if frequency not in _STEPS:
        raise ValueError(f"unknown frequency {frequency!r}, expected one of {FREQUENCIES}")
    return _STEPS[frequency]


def calendar_code(day: date, frequency: str) -> int:
    """Categorical calendar indicator for a timestamp (0-based)."""
    if frequency == "daily":
        return day.weekday()
    return day.isocalendar().week - 1


@dataclass(frozen=True)
class PanelDataset:
    """Dense regional panel on a regular calendar.

    ``values[t, i]`` is the observation for ``regions[i]`` at ``dates[t]``.
    Cells flagged in ``missing_mask`` were absent from the source file and
    hold NaN.
    """

    dates: tuple[date, ...]
    regions: tuple[str, ...]
    values: np.ndarray
    frequency: str
    missing_mask: np.ndarray

    def __post_init__(self):
        if len(self.dates) < 1 or len(self.regions) < 1:
            raise ValueError("panel needs at least one date and one region")
        step = frequency_step(self.frequency)
        for a, b in zip(self.dates, self.dates[1:]):
            if b - a != step:
                raise ValueError(
                    f"date-step inconsistent with frequency {self.frequency!r}: "
                    f"{a} -> {b}"
                )
        vals = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.missing_mask, dtype=bool)
        shape = (len(self.dates), len(self.regions))
        if vals.shape != shape or mask.shape != shape:
            raise ValueError(f"values/missing_mask must have shape {shape}")
        if not np.all(np.isfinite(vals[~mask])):
            raise ValueError("observed values must be finite")
        object.__setattr__(self, "values", freeze(vals))
        object.__setattr__(self, "missing_mask", freeze(mask))

    @property
    def num_steps(self) -> int:
        return len(self.dates)

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def index_of(self, day: date) -> int:
        """Index of a calendar date on the panel's axis."""
        step = frequency_step(self.frequency)
        offset = (day - self.dates[0]).days
        span = step.days
        idx, rem = divmod(offset, span)
        if rem != 0 or idx < 0 or idx >= self.num_steps:
            raise ValueError(f"date {day} is not on the panel's date axis")
        return idx

    def calendar_indicator(self, t: int) -> int:
        return calendar_code(self.dates[t], self.frequency)


@dataclass(frozen=True)
class Sample:
    """One supervised forecasting case.

    ``history`` holds the lookback rows ordered oldest to newest, ending at
    the origin; ``target`` is the observation ``horizon`` steps later.
    ``calendar_indicator`` encodes the target timestamp's calendar position.
    """

    origin: int
    horizon: int
    history: np.ndarray
    target: np.ndarray
    calendar_indicator: int

    def __post_init__(self):
        object.__setattr__(self, "history", freeze(np.asarray(self.history, dtype=np.float64)))
        object.__setattr__(self, "target", freeze(np.asarray(self.target, dtype=np.float64)))

    @property
    def target_index(self) -> int:
        return self.origin + self.horizon


@dataclass(frozen=True)
class PopulationVector:
    """Per-region populations aligned with a panel's region order."""

    regions: tuple[str, ...]
    populations: np.ndarray

    def __post_init__(self):
        pops = np.asarray(self.populations, dtype=np.float64)
        if pops.ndim != 1 or pops.shape[0] != len(self.regions):
            raise ValueError("populations must align with regions")
        if not np.all(np.isfinite(pops)) or np.any(pops <= 0):
            raise ValueError("populations must be finite and strictly positive")
        object.__setattr__(self, "populations", freeze(pops))


def load_panel(path: str | Path, frequency: str) -> PanelDataset:
    """Read a long-format ``date,region,value`` CSV into a dense panel.

    The date axis is the union of dates in the file and must form a regular
    grid at the declared frequency. Cells absent from the file are flagged
    missing. Duplicate (date, region) pairs, unparseable dates or values,
    and calendar gaps are rejected.
    """
    step = frequency_step(frequency)
    cells: dict[tuple[date, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["date", "region", "value"]:
            raise ValueError(f"{path}: expected header 'date,region,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                day = date.fromisoformat(row[0].strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad date {row[0]!r}: {exc}") from exc
            region = row[1].strip()
            if not region:
                raise ValueError(f"{path}:{lineno}: empty region identifier")
            try:
                value = float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric value {row[2]!r}") from exc
            if not math.isfinite(value):
                raise ValueError(f"{path}:{lineno}: non-finite value {row[2]!r}")
            key = (day, region)
            if key in cells:
                raise ValueError(f"{path}: duplicate (date, region) pair ({day}, {region})")
            cells[key] = value
    if not cells:
        raise ValueError(f"{path}: no data rows")

    dates = sorted({d for d, _ in cells})
    regions = sorted({r for _, r in cells})
    for a, b in zip(dates, dates[1:]):
        if b - a != step:
            raise ValueError(
                f"{path}: date-step inconsistent with frequency {frequency!r}: {a} -> {b}"
            )
    values = np.full((len(dates), len(regions)), np.nan)
    mask = np.ones((len(dates), len(regions)), dtype=bool)
    date_idx = {d: i for i, d in enumerate(dates)}
    region_idx = {r: j for j, r in enumerate(regions)}
    for (day, region), value in cells.items():
        values[date_idx[day], region_idx[region]] = value
        mask[date_idx[day], region_idx[region]] = False
    return PanelDataset(tuple(dates), tuple(regions), values, frequency, mask)


def save_panel(panel: PanelDataset, path: str | Path) -> None:
    """Write the observed cells back out in the loader's long format.

    Floats are written with ``repr`` so a reload reproduces the matrix
    bit-for-bit.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "region", "value"])
        for t, day in enumerate(panel.dates):
            for j, region in enumerate(panel.regions):
                if not panel.missing_mask[t, j]:
                    writer.writerow([day.isoformat(), region, repr(float(panel.values[t, j]))])


def load_population(path: str | Path, regions: tuple[str, ...]) -> PopulationVector:
    """Read a ``region,population`` CSV covering every panel region."""
    found: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["region", "population"]:
            raise ValueError(f"{path}: expected header 'region,population'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            region = row[0].strip()
            try:
                pop = float(row[1])
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad population row") from exc
            if region in found:
                raise ValueError(f"{path}: duplicate region {region!r}")
            found[region] = pop
    missing = [r for r in regions if r not in found]
    if missing:
        raise ValueError(f"{path}: no population for regions {missing}")
    return PopulationVector(tuple(regions), np.array([found[r] for r in regions]))


def make_samples(
    panel: PanelDataset,
    lookback: int,
    horizon: int,
    origins: list[int] | tuple[int, ...] | np.ndarray,
) -> tuple[list[Sample], list[int]]:
    """Build one sample per origin index.

    Origins violating the index bounds raise. Origins whose lookback window
    or target touches a missing cell are skipped and returned in the second
    element for diagnostics; imputation is deliberately not attempted.
    """
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    samples: list[Sample] = []
    skipped: list[int] = []
    for t in origins:
        t = int(t)
        if t < lookback - 1 or t + horizon > panel.num_steps - 1:
            raise ValueError(
                f"origin {t} out of bounds for lookback={lookback}, "
                f"horizon={horizon}, T={panel.num_steps}"
            )
        window = slice(t - lookback + 1, t + 1)
        if panel.missing_mask[window].any() or panel.missing_mask[t + horizon].any():
            skipped.append(t)
            continue
        samples.append(
            Sample(
                origin=t,
                horizon=horizon,
                history=panel.values[window].copy(),
                target=panel.values[t + horizon].copy(),
                calendar_indicator=panel.calendar_indicator(t + horizon),
            )
        )
    return samples, skipped


def chrono_split(samples: list[Sample], train_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Split origin-ordered samples into leading train and trailing validation.

    The train side takes ceil(train_fraction * N) samples; both sides must
    end up nonempty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    order = [s.origin for s in samples]
    if order != sorted(order):
        raise ValueError("samples must be ordered by origin")
    n_train = math.ceil(train_fraction * len(samples))
    train, val = samples[:n_train], samples[n_train:]
    if not train or not val:
        raise ValueError("window too short: chronological split left an empty partition")
    return train, val
