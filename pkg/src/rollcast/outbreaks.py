"""Rising-interval annotation and outbreak stratification.

Annotations mark periods where a region's signal is significantly rising.
They stratify scoring only and are never model inputs. The built-in
annotator is a simple sliding-window log-linear slope test; externally
computed interval files can be ingested instead when higher-fidelity
detection is wanted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
from scipy import stats

from .panel import PanelDataset, frequency_step

DEFAULT_WINDOWS = {"daily": 7, "weekly": 4}
DEFAULT_ALPHA = 0.05
MIN_RUN_LENGTH = 2


@dataclass(frozen=True)
class OutbreakInterval:
    region: str
    start: date
    end: date

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"interval end {self.end} precedes start {self.start}")

    def contains(self, day: date) -> bool:
        return self.start <= day <= self.end


@dataclass(frozen=True)
class AnnotationSet:
    """Per-region disjoint, sorted rising intervals with inclusive ends."""

    intervals: tuple[OutbreakInterval, ...]
    source: str  # "computed" | "ingested"

    def __post_init__(self):
        by_region: dict[str, list[OutbreakInterval]] = {}
        for iv in self.intervals:
            by_region.setdefault(iv.region, []).append(iv)
        for region, ivs in by_region.items():
            ivs.sort(key=lambda iv: iv.start)
            for a, b in zip(ivs, ivs[1:]):
                if b.start <= a.end:
                    raise ValueError(f"overlapping intervals for region {region!r}")

    def for_region(self, region: str) -> list[OutbreakInterval]:
        return [iv for iv in self.intervals if iv.region == region]

    def covers(self, region: str, day: date) -> bool:
        return any(iv.contains(day) for iv in self.intervals if iv.region == region)


def _window_slope_pvalues(series: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """OLS slope and two-sided p-value of log(value+1) over each trailing window.

    Entry t describes the window ending at t; entries before the first full
    window are NaN. A zero-residual fit gets p=0 when the slope is nonzero.
    """
    T = series.shape[0]
    y = np.log1p(series)
    x = np.arange(window, dtype=np.float64)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slopes = np.full(T, np.nan)
    pvals = np.full(T, np.nan)
    dof = window - 2
    for t in range(window - 1, T):
        seg = y[t - window + 1 : t + 1]
        slope = float(xc @ (seg - seg.mean())) / sxx
        resid = seg - seg.mean() - slope * xc
        rss = float(resid @ resid)
        slopes[t] = slope
        if rss <= 1e-300 * max(1.0, float(seg @ seg)):
            pvals[t] = 0.0 if slope != 0.0 else 1.0
            continue
        se = np.sqrt(rss / dof / sxx)
        tstat = slope / se
        pvals[t] = 2.0 * stats.t.sf(abs(tstat), dof)
    return slopes, pvals


def annotate_rising(
    panel: PanelDataset,
    window: int | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> AnnotationSet:
    """Mark maximal runs of timestamps whose trailing-window slope is
    significantly positive.

    Runs shorter than two steps are discarded. Missing cells inside a
    window disqualify that timestamp. Deterministic in (panel, window,
    alpha).
    """
    if window is None:
        window = DEFAULT_WINDOWS[panel.frequency]
    if window < 3:
        raise ValueError("window must be >= 3")
    if window > panel.num_steps:
        raise ValueError(f"window {window} exceeds panel length {panel.num_steps}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")

    intervals: list[OutbreakInterval] = []
    for j, region in enumerate(panel.regions):
        series = panel.values[:, j]
        observed = ~panel.missing_mask[:, j]
        slopes, pvals = _window_slope_pvalues(np.where(observed, series, 0.0), window)
        window_ok = np.array(
            [observed[max(0, t - window + 1) : t + 1].all() if t >= window - 1 else False
             for t in range(panel.num_steps)]
        )
        rising = window_ok & (slopes > 0) & (pvals < alpha)
        start = None
        for t in range(panel.num_steps + 1):
            if t < panel.num_steps and rising[t]:
                if start is None:
                    start = t
                continue
            if start is not None:
                if t - start >= MIN_RUN_LENGTH:
                    intervals.append(OutbreakInterval(region, panel.dates[start], panel.dates[t - 1]))
                start = None
    return AnnotationSet(tuple(intervals), source="computed")


def load_annotations(path: str | Path, panel: PanelDataset) -> AnnotationSet:
    """Read a ``region,start,end`` CSV, validating against the panel and
    merging any overlapping intervals per region."""
    raw: dict[str, list[tuple[date, date]]] = {}
    known = set(panel.regions)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["region", "start", "end"]:
            raise ValueError(f"{path}: expected header 'region,start,end'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            region = row[0].strip()
            if region not in known:
                raise ValueError(f"{path}:{lineno}: unknown region {region!r}")
            try:
                start = date.fromisoformat(row[1].strip())
                end = date.fromisoformat(row[2].strip())
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad interval row") from exc
            if end < start:
                raise ValueError(f"{path}:{lineno}: end {end} precedes start {start}")
            # Both endpoints must sit on the panel's date axis.
            panel.index_of(start)
            panel.index_of(end)
            raw.setdefault(region, []).append((start, end))

    intervals: list[OutbreakInterval] = []
    for region, spans in raw.items():
        spans.sort()
        merged: list[list[date]] = []
        for start, end in spans:
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        intervals.extend(OutbreakInterval(region, s, e) for s, e in merged)
    return AnnotationSet(tuple(intervals), source="ingested")


def save_annotations(annotations: AnnotationSet, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "start", "end"])
        for iv in sorted(annotations.intervals, key=lambda iv: (iv.region, iv.start)):
            writer.writerow([iv.region, iv.start.isoformat(), iv.end.isoformat()])


def stratify(records, annotations: AnnotationSet, frequency: str):
    """Partition forecast records by whether the *target* timestamp falls
    inside one of its region's intervals (inclusive ends)."""
    step = frequency_step(frequency)
    outbreak, non_outbreak = [], []
    for rec in records:
        target_day = rec.origin + step * rec.horizon
        (outbreak if annotations.covers(rec.region, target_day) else non_outbreak).append(rec)
    return outbreak, non_outbreak
