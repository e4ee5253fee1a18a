"""Point-forecast metrics, outlier filtering, and bootstrap uncertainty.

All metrics pool errors across regions and origins. The filtered variants
drop zero-valued targets and targets outside an interquartile-range fence
before scoring, mirroring how zeros and reporting artifacts are excluded
from operational evaluation. Uncertainty comes from a month-block
bootstrap, with a fixed-effect inverse-variance pool across horizons.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

from .panel import frequency_step
from .validation import freeze

RECORD_COLUMNS = ("origin", "horizon", "region", "prediction", "truth", "naive_reference")
PREDICTION_COLUMNS = ("origin", "horizon", "region", "prediction")

DEFAULT_FENCE_MULTIPLIER = 1.5
DEFAULT_REPLICATES = 1000
# Half-width of a 95% normal interval, used to convert bootstrap intervals
# to variance proxies and back.
Z95 = 1.959963984540054


@dataclass(frozen=True)
class ForecastRecord:
    """One (origin, horizon, region) prediction with its truth and the
    persistence reference (last observed value at the origin)."""

    origin: date
    horizon: int
    region: str
    prediction: float
    truth: float
    naive_reference: float

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("truth", "naive_reference"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def target_date(self, frequency: str) -> date:
        return self.origin + frequency_step(frequency) * self.horizon


@dataclass(frozen=True)
class MetricSet:
    mse: float
    mae: float
    rmse: float
    med_ae: float
    med_se: float
    count: int


@dataclass(frozen=True)
class FilterMask:
    """Per-record keep flags plus the fence geometry that produced them."""

    keep: np.ndarray
    q1: float
    q3: float
    lower_fence: float
    upper_fence: float
    c: float

    def __post_init__(self):
        object.__setattr__(self, "keep", freeze(np.asarray(self.keep, dtype=bool)))

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    replicates: int
    seed: int


def _errors(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    preds = np.array([r.prediction for r in records], dtype=np.float64)
    truths = np.array([r.truth for r in records], dtype=np.float64)
    naive = np.array([r.naive_reference for r in records], dtype=np.float64)
    return preds, truths, naive


def point_metrics(records) -> MetricSet:
    """Means and medians of squared and absolute errors."""
    if not records:
        raise ValueError("no records")
    preds, truths, _ = _errors(records)
    err = preds - truths
    mse = float(np.mean(err**2))
    return MetricSet(
        mse=mse,
        mae=float(np.mean(np.abs(err))),
        rmse=math.sqrt(mse),
        med_ae=float(np.median(np.abs(err))),
        med_se=float(np.median(err**2)),
        count=len(records),
    )


def build_filter_mask(truths, c: float = DEFAULT_FENCE_MULTIPLIER) -> FilterMask:
    """Flag truths to keep: nonzero and inside [q1 - c*IQR, q3 + c*IQR].

    Quartiles use linear interpolation at position q*(N-1) on the sorted
    values (numpy's default); the fence placement depends on this
    convention, so it is pinned here.
    """
    values = np.asarray(truths, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no truths")
    if c < 0:
        raise ValueError("fence multiplier c must be >= 0")
    q1, q3 = np.percentile(values, [25.0, 75.0])
    iqr = q3 - q1
    lower, upper = q1 - c * iqr, q3 + c * iqr
    keep = (values != 0.0) & (values >= lower) & (values <= upper)
    return FilterMask(keep=keep, q1=float(q1), q3=float(q3),
                      lower_fence=float(lower), upper_fence=float(upper), c=c)


def filtered_metrics(records, mask: FilterMask) -> MetricSet:
    """Point metrics restricted to mask-kept records."""
    if len(records) != mask.keep.shape[0]:
        raise ValueError("mask length does not match records")
    kept = [r for r, k in zip(records, mask.keep) if k]
    if not kept:
        raise ValueError("empty after filtering")
    return point_metrics(kept)


def win_rate(records) -> float:
    """Fraction of predictions strictly more accurate than the persistence
    reference; ties count as non-wins."""
    if not records:
        raise ValueError("no records")
    preds, truths, naive = _errors(records)
    return float(np.mean(np.abs(preds - truths) < np.abs(naive - truths)))


def mean_signed_error(records) -> float:
    """Mean of prediction minus truth; negative means under-prediction."""
    if not records:
        raise ValueError("no records")
    preds, truths, _ = _errors(records)
    return float(np.mean(preds - truths))


def relative_rmse(records) -> float:
    """Pooled RMSE of the model over pooled RMSE of the persistence
    reference, on the identical record set. Exactly 1.0 when the
    prediction is the reference itself."""
    if not records:
        raise ValueError("no records")
    preds, truths, naive = _errors(records)
    model = math.sqrt(float(np.mean((preds - truths) ** 2)))
    base = math.sqrt(float(np.mean((naive - truths) ** 2)))
    if base == 0.0:
        return 1.0 if model == 0.0 else math.inf
    return model / base


STATISTICS = {
    "mse": lambda recs: point_metrics(recs).mse,
    "mae": lambda recs: point_metrics(recs).mae,
    "rmse": lambda recs: point_metrics(recs).rmse,
    "med_ae": lambda recs: point_metrics(recs).med_ae,
    "med_se": lambda recs: point_metrics(recs).med_se,
    "win_rate": win_rate,
    "mean_signed_error": mean_signed_error,
    "relative_rmse": relative_rmse,
}


def bootstrap_by_month(
    records,
    statistic: str,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    frequency: str = "daily",
) -> IntervalEstimate:
    """Percentile bootstrap CI resampling calendar-month blocks of records.

    Records are grouped by the calendar month of the target date; each
    replicate draws months with replacement and recomputes the statistic on
    the concatenation. Deterministic under a fixed seed.
    """
    if statistic not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}")
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    fn = STATISTICS[statistic]
    months: dict[tuple[int, int], list] = {}
    for rec in records:
        day = rec.target_date(frequency)
        months.setdefault((day.year, day.month), []).append(rec)
    if len(months) < 2:
        raise ValueError("insufficient blocks: need records from at least 2 calendar months")
    blocks = [months[k] for k in sorted(months)]
    point = fn(records)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = rng.integers(0, len(blocks), size=(replicates, len(blocks)))
    values = np.empty(replicates)
    for b in range(replicates):
        resample: list = []
        for idx in draws[b]:
            resample.extend(blocks[idx])
        values[b] = fn(resample)
    lower, upper = np.percentile(values, [2.5, 97.5])
    return IntervalEstimate(point=float(point), lower=float(lower), upper=float(upper),
                            replicates=replicates, seed=seed)


def meta_across_horizons(per_horizon: list[IntervalEstimate]) -> IntervalEstimate:
    """Fixed-effect inverse-variance pool of per-horizon estimates.

    Each horizon's variance proxy comes from its bootstrap interval
    half-width; zero-width intervals get their sigma floored so no single
    horizon takes infinite weight.
    """
    if not per_horizon:
        raise ValueError("nothing to pool")
    if len(per_horizon) == 1:
        return per_horizon[0]
    points = np.array([e.point for e in per_horizon])
    sigmas = np.array([max((e.upper - e.lower) / 2.0 / Z95, 1e-9) for e in per_horizon])
    weights = 1.0 / sigmas**2
    pooled = float(np.sum(weights * points) / np.sum(weights))
    pooled_sigma = float(np.sqrt(1.0 / np.sum(weights)))
    return IntervalEstimate(
        point=pooled,
        lower=pooled - Z95 * pooled_sigma,
        upper=pooled + Z95 * pooled_sigma,
        replicates=sum(e.replicates for e in per_horizon),
        seed=per_horizon[0].seed,
    )


def write_records(records, path: str | Path) -> None:
    """Write scored records with full-precision floats so re-reading is
    lossless and re-running is byte-identical."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([
                r.origin.isoformat(), r.horizon, r.region,
                repr(float(r.prediction)), repr(float(r.truth)), repr(float(r.naive_reference)),
            ])


def read_prediction_rows(path: str | Path) -> tuple[list[dict], bool]:
    """Read a records CSV, accepting either the full scored schema or the
    prediction-only schema external forecasters emit.

    Returns parsed rows plus a flag saying whether truth columns were
    present. Non-numeric or non-finite predictions are rejected with their
    row numbers.
    """
    rows: list[dict] = []
    bad_rows: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = tuple(h.strip() for h in header)
        if header == RECORD_COLUMNS:
            has_truth = True
        elif header == PREDICTION_COLUMNS:
            has_truth = False
        else:
            raise ValueError(
                f"{path}: expected header {','.join(RECORD_COLUMNS)} or {','.join(PREDICTION_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                parsed = {
                    "origin": date.fromisoformat(row[0].strip()),
                    "horizon": int(row[1]),
                    "region": row[2].strip(),
                    "prediction": float(row[3]),
                }
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad row: {exc}") from exc
            if not math.isfinite(parsed["prediction"]):
                bad_rows.append(lineno)
            if has_truth:
                parsed["truth"] = float(row[4])
                parsed["naive_reference"] = float(row[5])
            parsed["lineno"] = lineno
            rows.append(parsed)
    if bad_rows:
        raise ValueError(f"{path}: non-finite predictions at rows {bad_rows}")
    if not rows:
        raise ValueError(f"{path}: no records")
    return rows, has_truth
