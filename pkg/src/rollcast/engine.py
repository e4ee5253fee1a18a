"""Rolling-origin retraining protocol: plan, fit, forecast, score.

Each round freezes a model trained on the most recent ``train_size``
observations, then issues forecasts from the following ``cadence``
origins as data accrue; the next round's window advances by the cadence.
Scoring stratifies records into all/outbreak/non-outbreak/filtered cells
per horizon, attaches month-block bootstrap intervals, and pools across
horizons by inverse-variance meta-analysis.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .forecasters import (
    ModelSpec,
    TrainConfig,
    fit_ar1,
    make_naive_model,
    predict,
    train,
)
from .graph import MixingOperator
from .metrics import (
    ForecastRecord,
    IntervalEstimate,
    bootstrap_by_month,
    build_filter_mask,
    mean_signed_error,
    meta_across_horizons,
    point_metrics,
    read_prediction_rows,
    relative_rmse,
    win_rate,
)
from .outbreaks import AnnotationSet, stratify
from .panel import PanelDataset, PopulationVector, make_samples
from .patches import PatchConfig

DEFAULT_LOOKBACK = 12
DEFAULT_CADENCE = 8
DEFAULT_TRAIN_SIZE = 100
DEFAULT_HORIZONS = {"daily": tuple(range(1, 29)), "weekly": (1, 2, 3, 4)}
DEFAULT_TRAIN_FRACTION = 0.8
DEFAULT_BOOTSTRAP_STATISTICS = ("rmse", "win_rate")

STRATA = ("all", "outbreak", "non_outbreak", "filtered")


@dataclass(frozen=True)
class RoundPlan:
    """One retraining round.

    The training window is the ``train_size`` most recent observations at
    the retraining time; evaluation origins start at the window end (the
    first time the frozen model can forecast prospectively) and run for
    ``cadence`` steps, trimmed to origins that can still reach at least
    the shortest horizon's target. Training/validation origin splits are
    per horizon because each horizon's targets must stay inside the
    window.
    """

    round_index: int
    window_start: int
    window_end: int
    eval_origins: tuple[int, ...]
    horizons: tuple[int, ...]
    splits: dict[int, tuple[tuple[int, ...], tuple[int, ...]]]


def plan_rounds(
    panel: PanelDataset,
    lookback: int = DEFAULT_LOOKBACK,
    cadence: int = DEFAULT_CADENCE,
    train_size: int = DEFAULT_TRAIN_SIZE,
    horizons: tuple[int, ...] | None = None,
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
) -> list[RoundPlan]:
    """Enumerate retraining rounds over the panel.

    The final round may keep fewer than ``cadence`` evaluation origins when
    the series ends; a horizon simply skips origins whose target would fall
    off the end (per-horizon headroom).
    """
    if horizons is None:
        horizons = DEFAULT_HORIZONS[panel.frequency]
    horizons = tuple(sorted(set(int(h) for h in horizons)))
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive integers")
    T = panel.num_steps
    minimal = train_size + max(horizons)
    if T < minimal:
        raise ValueError(
            f"series too short for one round: T={T}, need at least {minimal} "
            f"(train_size + max horizon)"
        )
    if lookback < 1 or train_size <= lookback:
        raise ValueError("need train_size > lookback >= 1")
    for h in horizons:
        n_origins = train_size - lookback - h + 1
        if n_origins < 2:
            raise ValueError(
                f"horizon {h} leaves {n_origins} training origins in a "
                f"{train_size}-observation window; need at least 2 for a split"
            )

    h_min = horizons[0]
    plans: list[RoundPlan] = []
    window_end = train_size - 1
    while True:
        eval_origins = tuple(
            t for t in range(window_end, window_end + cadence)
            if t + h_min <= T - 1
        )
        if not eval_origins:
            break
        splits: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {}
        for h in horizons:
            origins = tuple(range(window_end - train_size + lookback, window_end - h + 1))
            n_train = math.ceil(train_fraction * len(origins))
            splits[h] = (origins[:n_train], origins[n_train:])
        plans.append(
            RoundPlan(
                round_index=len(plans),
                window_start=window_end - train_size + 1,
                window_end=window_end,
                eval_origins=eval_origins,
                horizons=horizons,
                splits=splits,
            )
        )
        window_end += cadence
    return plans


def plans_to_json(plans: list[RoundPlan], panel: PanelDataset) -> dict:
    return {
        "convention": {
            "eval_origins": "the cadence origins starting at the training-window end",
            "headroom": "per-horizon: each (origin, horizon) pair is scored iff its target exists",
        },
        "rounds": [
            {
                "round_index": p.round_index,
                "window_start": panel.dates[p.window_start].isoformat(),
                "window_end": panel.dates[p.window_end].isoformat(),
                "eval_origins": [panel.dates[t].isoformat() for t in p.eval_origins],
                "horizons": list(p.horizons),
                "splits": {
                    str(h): {
                        "train": [panel.dates[t].isoformat() for t in (tr[0], tr[-1])],
                        "validation": [panel.dates[t].isoformat() for t in (va[0], va[-1])],
                    }
                    for h, (tr, va) in p.splits.items()
                },
            }
            for p in plans
        ],
    }


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    panel_path: str
    frequency: str
    spec: ModelSpec
    patches: PatchConfig = field(default_factory=PatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adjacency_path: str | None = None
    population_path: str | None = None
    annotations_path: str | None = None
    annotate_window: int | None = None
    annotate_alpha: float = 0.05
    horizons: tuple[int, ...] | None = None
    lookback: int = DEFAULT_LOOKBACK
    cadence: int = DEFAULT_CADENCE
    train_size: int = DEFAULT_TRAIN_SIZE
    seed: int = 0
    grid: dict = field(default_factory=dict)
    bootstrap_replicates: int = 1000
    bootstrap_statistics: tuple[str, ...] = DEFAULT_BOOTSTRAP_STATISTICS
    workers: int = 1
    output_dir: str | None = None
    dataset_id: str = "panel"


def load_run_config(path: str | Path) -> RunConfig:
    """Parse the single-document JSON run configuration."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    dataset = raw.get("dataset")
    if not dataset or "panel" not in dataset or "frequency" not in dataset:
        raise ValueError(f"{path}: config needs dataset.panel and dataset.frequency")
    model = raw.get("model") or {}
    if "kind" not in model:
        raise ValueError(f"{path}: config needs model.kind")
    base = Path(path).parent

    def resolve(p):
        return str((base / p)) if p and not Path(p).is_absolute() else p

    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("seed", int(raw.get("seed", 0)))
    annotate = raw.get("annotate") or {}
    bootstrap = raw.get("bootstrap") or {}
    return RunConfig(
        panel_path=resolve(dataset["panel"]),
        frequency=dataset["frequency"],
        spec=ModelSpec(kind=model["kind"], hyperparameters=model.get("hyperparameters", {})),
        patches=PatchConfig.from_dict(raw.get("patches")),
        train=TrainConfig(**train_raw),
        adjacency_path=resolve(dataset.get("adjacency")),
        population_path=resolve(dataset.get("population")),
        annotations_path=resolve(dataset.get("annotations")),
        annotate_window=annotate.get("window"),
        annotate_alpha=annotate.get("alpha", 0.05),
        horizons=tuple(raw["horizons"]) if raw.get("horizons") else None,
        lookback=int(raw.get("lookback", DEFAULT_LOOKBACK)),
        cadence=int(raw.get("cadence", DEFAULT_CADENCE)),
        train_size=int(raw.get("train_size", DEFAULT_TRAIN_SIZE)),
        seed=int(raw.get("seed", 0)),
        grid=raw.get("grid") or {},
        bootstrap_replicates=int(bootstrap.get("replicates", 1000)),
        bootstrap_statistics=tuple(bootstrap.get("statistics", DEFAULT_BOOTSTRAP_STATISTICS)),
        workers=int(raw.get("workers", 1)),
        output_dir=resolve(raw.get("output_dir")),
        dataset_id=str(raw.get("dataset_id", Path(dataset["panel"]).stem)),
    )


# ---------------------------------------------------------------------------
# Fitting and forecasting one work item


def _derive_seed(seed: int, round_index: int, horizon: int) -> int:
    # Stable per-(round, horizon) streams so rerunning one round never
    # perturbs another.
    return int(np.random.SeedSequence([seed, round_index, horizon]).generate_state(1)[0])


def make_records(samples, predictions, panel: PanelDataset) -> list[ForecastRecord]:
    records = []
    for sample, pred in zip(samples, predictions):
        for j, region in enumerate(panel.regions):
            records.append(
                ForecastRecord(
                    origin=panel.dates[sample.origin],
                    horizon=sample.horizon,
                    region=region,
                    prediction=float(pred[j]),
                    truth=float(sample.target[j]),
                    naive_reference=float(sample.history[-1, j]),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Score tables


@dataclass(frozen=True)
class ScoreRow:
    horizon: int | str            # native steps, or "pooled"
    stratum: str
    count: int
    mse: float
    mae: float
    rmse: float
    med_ae: float
    med_se: float
    win_rate: float
    mean_signed_error: float
    relative_rmse_vs_naive: float
    intervals: dict[str, IntervalEstimate | None]

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "stratum": self.stratum,
            "count": self.count,
            "mse": self.mse,
            "mae": self.mae,
            "rmse": self.rmse,
            "med_ae": self.med_ae,
            "med_se": self.med_se,
            "win_rate": self.win_rate,
            "mean_signed_error": self.mean_signed_error,
            "relative_rmse_vs_naive": self.relative_rmse_vs_naive,
            "intervals": {
                stat: None if est is None else {
                    "point": est.point, "lower": est.lower, "upper": est.upper,
                    "replicates": est.replicates, "seed": est.seed,
                }
                for stat, est in self.intervals.items()
            },
        }


@dataclass(frozen=True)
class ScoreTable:
    dataset_id: str
    model_kind: str
    patch_ids: tuple[str, ...]
    seed: int
    rows: tuple[ScoreRow, ...]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_id,
            "model": self.model_kind,
            "patches": list(self.patch_ids),
            "seed": self.seed,
            "rows": [row.to_dict() for row in self.rows],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def cell(self, horizon, stratum: str) -> ScoreRow | None:
        for row in self.rows:
            if row.horizon == horizon and row.stratum == stratum:
                return row
        return None


def _score_cell(records, horizon, stratum, statistics, replicates, seed, frequency,
                notes: list[str]) -> ScoreRow:
    metrics = point_metrics(records)
    intervals: dict[str, IntervalEstimate | None] = {}
    for stat in statistics:
        try:
            intervals[stat] = bootstrap_by_month(
                records, stat, replicates=replicates,
                seed=_derive_seed(seed, _stratum_code(stratum), _horizon_code(horizon)),
                frequency=frequency,
            )
        except ValueError as exc:
            intervals[stat] = None
            notes.append(f"bootstrap skipped for horizon={horizon} stratum={stratum} "
                         f"statistic={stat}: {exc}")
    return ScoreRow(
        horizon=horizon,
        stratum=stratum,
        count=metrics.count,
        mse=metrics.mse,
        mae=metrics.mae,
        rmse=metrics.rmse,
        med_ae=metrics.med_ae,
        med_se=metrics.med_se,
        win_rate=win_rate(records),
        mean_signed_error=mean_signed_error(records),
        relative_rmse_vs_naive=relative_rmse(records),
        intervals=intervals,
    )


def _stratum_code(stratum: str) -> int:
    return STRATA.index(stratum)


def _horizon_code(horizon) -> int:
    return 0 if horizon == "pooled" else int(horizon)


def score_records(
    records: list[ForecastRecord],
    annotations: AnnotationSet,
    frequency: str,
    *,
    dataset_id: str = "panel",
    model_kind: str = "external",
    patch_ids: tuple[str, ...] = (),
    seed: int = 0,
    statistics: tuple[str, ...] = DEFAULT_BOOTSTRAP_STATISTICS,
    replicates: int = 1000,
    filter_c: float = 1.5,
) -> ScoreTable:
    """Build the full per-(horizon, stratum) score table for a record set.

    The filtered stratum applies an IQR fence (and zero-exclusion) computed
    over that horizon's pooled truths; outbreak strata come from the
    annotation set keyed on target timestamps. Pooled rows recompute point
    metrics on the union and meta-analyze bootstrap intervals across
    horizons.
    """
    if not records:
        raise ValueError("no records to score")
    notes: list[str] = []
    horizons = sorted({r.horizon for r in records})
    rows: list[ScoreRow] = []
    per_stratum_records: dict[str, list[ForecastRecord]] = {s: [] for s in STRATA}
    for h in horizons:
        h_records = [r for r in records if r.horizon == h]
        outbreak, non_outbreak = stratify(h_records, annotations, frequency)
        mask = build_filter_mask(np.array([r.truth for r in h_records]), filter_c)
        filtered = [r for r, keep in zip(h_records, mask.keep) if keep]
        if not filtered:
            notes.append(f"horizon={h}: empty after filtering (all {len(h_records)} "
                         f"records are zeros or fence outliers)")
        cells = {"all": h_records, "outbreak": outbreak,
                 "non_outbreak": non_outbreak, "filtered": filtered}
        for stratum, recs in cells.items():
            per_stratum_records[stratum].extend(recs)
            if not recs:
                continue
            rows.append(_score_cell(recs, h, stratum, statistics, replicates, seed,
                                    frequency, notes))
    for stratum in STRATA:
        recs = per_stratum_records[stratum]
        if not recs:
            continue
        pooled = _score_cell(recs, "pooled", stratum, (), replicates, seed, frequency, notes)
        per_h = {
            stat: [row.intervals.get(stat) for row in rows
                   if row.stratum == stratum and row.horizon != "pooled"]
            for stat in statistics
        }
        intervals: dict[str, IntervalEstimate | None] = {}
        for stat, ests in per_h.items():
            usable = [e for e in ests if e is not None]
            intervals[stat] = meta_across_horizons(usable) if usable else None
        rows.append(replace(pooled, intervals=intervals))
    return ScoreTable(
        dataset_id=dataset_id, model_kind=model_kind, patch_ids=patch_ids,
        seed=seed, rows=tuple(rows), notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Grid search


def _lattice(grid: dict) -> list[dict]:
    """Cartesian product of grid values, in key insertion order."""
    keys = list(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        points.append(dict(zip(keys, combo)))
    return points


def apply_grid_point(config: RunConfig, point: dict) -> RunConfig:
    """Resolve grid keys onto a run configuration.

    Plain keys address TrainConfig fields first, then model
    hyperparameters; dotted keys like ``epi.lambda_epi`` address fields of
    active patches.
    """
    hyper = dict(config.spec.hyperparameters)
    train_kwargs: dict = {}
    patches_raw = config.patches.to_dict()
    for key, value in point.items():
        if key in ("epochs", "learning_rate", "l2", "loss"):
            train_kwargs[key] = value
        elif "." in key:
            group, name = key.split(".", 1)
            if group not in patches_raw:
                raise ValueError(f"grid key {key!r} targets inactive patch {group!r}")
            patches_raw[group][name] = value
        else:
            hyper[key] = value
    return replace(
        config,
        spec=replace(config.spec, hyperparameters=hyper),
        train=replace(config.train, **train_kwargs),
        patches=PatchConfig.from_dict(patches_raw),
    )


def _validation_loss(config: RunConfig, panel: PanelDataset, plan: RoundPlan,
                     horizon: int, mixing, populations) -> float:
    """Validation MSE of one configuration on the first round's split."""
    spec = replace(config.spec, horizon=horizon)
    train_origins, val_origins = plan.splits[horizon]
    train_samples, _ = make_samples(panel, config.lookback, horizon, list(train_origins))
    val_samples, _ = make_samples(panel, config.lookback, horizon, list(val_origins))
    if not train_samples or not val_samples:
        raise ValueError("missing data left an empty split in the first round")
    if spec.kind == "naive":
        model = make_naive_model(horizon)
    elif spec.kind == "ar1":
        series = np.where(panel.missing_mask, np.nan, panel.values)
        model = fit_ar1(series[plan.window_start : train_origins[-1] + 1])
    else:
        seed = _derive_seed(config.train.seed, plan.round_index, horizon)
        model = train(spec, train_samples, val_samples, replace(config.train, seed=seed),
                      config.patches, mixing=mixing, populations=populations,
                      frequency=config.frequency)
        return float(model.diagnostics["best_val_loss"])
    preds = predict(model, val_samples, mixing=mixing)
    targets = np.stack([s.target for s in val_samples])
    return float(np.mean((preds - targets) ** 2))


def grid_search(
    config: RunConfig,
    panel: PanelDataset,
    mixing: MixingOperator | None = None,
    populations: PopulationVector | None = None,
) -> tuple[RunConfig, dict]:
    """Select hyperparameters on the first retraining window's split.

    Every lattice point is trained on the first round's train/validation
    split at the shortest configured horizon; the point with the lowest
    validation loss wins, ties broken by lattice order, and the selection
    stays fixed for all later rounds. Diverging points are recorded;
    if every point diverges the search fails listing their losses.
    """
    if not config.grid:
        return config, {"points": [], "selected": None}
    plan = plan_rounds(panel, config.lookback, config.cadence, config.train_size,
                       config.horizons)[0]
    horizon = plan.horizons[0]
    points = _lattice(config.grid)
    losses: list[float] = []
    for point in points:
        try:
            losses.append(_validation_loss(apply_grid_point(config, point), panel, plan,
                                           horizon, mixing, populations))
        except (RuntimeError, ValueError):
            losses.append(float("inf"))
    if all(math.isinf(loss) for loss in losses):
        raise RuntimeError(
            "grid search failed: every point diverged; losses="
            + str([(p, loss) for p, loss in zip(points, losses)])
        )
    best = min(range(len(points)), key=lambda i: losses[i])
    report = {
        "points": [{"point": p, "validation_loss": loss} for p, loss in zip(points, losses)],
        "selected": points[best],
        "selection_horizon": horizon,
    }
    return apply_grid_point(config, points[best]), report


# ---------------------------------------------------------------------------
# Benchmark run


@dataclass(frozen=True)
class BenchmarkRun:
    config: RunConfig
    plans: list[RoundPlan]
    records: list[ForecastRecord]
    score_table: ScoreTable
    diagnostics: dict


def _fit_item(args):
    """Worker for one (round, horizon): fit from scratch, forecast the
    round's eval origins, return records plus diagnostics."""
    (panel, mixing, populations, plan, h, spec, patches, train_config,
     frequency, lookback) = args
    spec = replace(spec, horizon=h)
    train_origins, val_origins = plan.splits[h]
    diagnostics: dict = {"round": plan.round_index, "horizon": h}
    train_samples, skipped_train = make_samples(panel, lookback, h, list(train_origins))
    val_samples, skipped_val = make_samples(panel, lookback, h, list(val_origins))
    diagnostics["skipped_train_origins"] = len(skipped_train) + len(skipped_val)
    if spec.kind == "naive":
        model = make_naive_model(h)
    elif spec.kind == "ar1":
        if not patches.is_empty:
            raise ValueError("patches apply only to trainable models, not ar1")
        boundary = train_origins[-1]
        series = np.where(panel.missing_mask, np.nan, panel.values)
        model = fit_ar1(series[plan.window_start : boundary + 1])
    else:
        if not train_samples or not val_samples:
            raise ValueError("missing data left an empty training or validation split")
        seed = _derive_seed(train_config.seed, plan.round_index, h)
        model = train(
            spec, train_samples, val_samples, replace(train_config, seed=seed),
            patches, mixing=mixing,
            populations=populations, frequency=frequency,
        )
    eval_origins = [t for t in plan.eval_origins if t + h <= panel.num_steps - 1]
    eval_samples, skipped_eval = make_samples(panel, lookback, h, eval_origins)
    diagnostics["skipped_eval_origins"] = len(skipped_eval)
    diagnostics["train_diagnostics"] = {
        k: v for k, v in model.diagnostics.items() if k != "val_history"
    }
    if not eval_samples:
        return [], diagnostics
    predictions = predict(model, eval_samples, mixing=mixing)
    return make_records(eval_samples, predictions, panel), diagnostics


def run_benchmark(
    config: RunConfig,
    panel: PanelDataset,
    mixing: MixingOperator | None = None,
    populations: PopulationVector | None = None,
    annotations: AnnotationSet | None = None,
) -> BenchmarkRun:
    """Execute the full rolling protocol for one model configuration.

    A failed (round, horizon) fit is recorded in the diagnostics and its
    records omitted; the run continues. Deterministic under the run seed,
    including the bootstrap intervals, regardless of worker count.
    """
    from .outbreaks import annotate_rising

    if config.spec.kind == "external":
        raise ValueError("external models run out of process: use export-tasks, "
                         "then score their records CSV")
    if config.spec.kind == "graph_linear" and mixing is None:
        raise ValueError("graph_linear needs an adjacency file")
    if config.patches.needs_mixing() and mixing is None:
        raise ValueError("the epi patch needs an adjacency file")
    if config.patches.needs_population() and populations is None:
        raise ValueError("epidemic branches need a population file")
    if config.spec.kind in ("naive", "ar1") and not config.patches.is_empty:
        raise ValueError(f"patches apply only to trainable models, not {config.spec.kind}")
    if annotations is None:
        annotations = annotate_rising(panel, config.annotate_window, config.annotate_alpha)

    plans = plan_rounds(panel, config.lookback, config.cadence, config.train_size,
                        config.horizons)
    horizons = plans[0].horizons
    items = [
        (panel, mixing, populations, plan, h, config.spec, config.patches,
         config.train, config.frequency, config.lookback)
        for plan in plans
        for h in horizons
    ]
    records: list[ForecastRecord] = []
    fit_diagnostics: list[dict] = []
    failures: list[dict] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_fit_item_safe, items))
    else:
        results = [_fit_item_safe(item) for item in items]
    for (recs, diag), item in zip(results, items):
        if "error" in diag:
            failures.append(diag)
        else:
            fit_diagnostics.append(diag)
            records.extend(recs)
    records.sort(key=lambda r: (r.horizon, r.origin, r.region))
    if not records:
        raise RuntimeError("benchmark produced no records; every fit failed")
    # The filtered evaluation stratum always uses the standard fence so
    # score tables stay comparable across models; a filter patch's custom c
    # affects the training loss only.
    score_table = score_records(
        records, annotations, config.frequency,
        dataset_id=config.dataset_id, model_kind=config.spec.kind,
        patch_ids=tuple(config.patches.active_ids()), seed=config.seed,
        statistics=config.bootstrap_statistics, replicates=config.bootstrap_replicates,
    )
    diagnostics = {
        "record_count": len(records),
        "round_count": len(plans),
        "failures": failures,
        "fits": fit_diagnostics,
        "annotation_intervals": len(annotations.intervals),
    }
    return BenchmarkRun(config=config, plans=plans, records=records,
                        score_table=score_table, diagnostics=diagnostics)


def _fit_item_safe(args):
    plan, h = args[3], args[4]
    try:
        return _fit_item(args)
    except Exception as exc:  # noqa: BLE001 - a failed round must not kill the run
        return [], {"round": plan.round_index, "horizon": h, "error": str(exc)}


# ---------------------------------------------------------------------------
# External forecast scoring


def score_external(
    records_path: str | Path,
    panel: PanelDataset,
    annotations: AnnotationSet,
    config: RunConfig,
) -> ScoreTable:
    """Score a plug-in forecaster's records CSV through the identical
    pipeline as in-process runs.

    Truths and persistence references are re-derived from the panel; if the
    file carries its own truth columns they must match, which catches both
    tampering and misaligned panels. Origins must belong to a planned
    round and horizons to the configured set.
    """
    rows, has_truth = read_prediction_rows(records_path)
    plans = plan_rounds(panel, config.lookback, config.cadence, config.train_size,
                        config.horizons)
    horizons = set(plans[0].horizons)
    eval_origin_indices = {t for plan in plans for t in plan.eval_origins}
    region_index = {r: j for j, r in enumerate(panel.regions)}
    records: list[ForecastRecord] = []
    bad: list[str] = []
    seen: set[tuple] = set()
    for row in rows:
        lineno = row["lineno"]
        try:
            t = panel.index_of(row["origin"])
        except ValueError:
            bad.append(f"row {lineno}: origin {row['origin']} not on the panel date axis")
            continue
        if t not in eval_origin_indices:
            bad.append(f"row {lineno}: origin {row['origin']} is not an evaluation origin "
                       f"of any planned round")
            continue
        if row["horizon"] not in horizons:
            bad.append(f"row {lineno}: horizon {row['horizon']} not in the configured set")
            continue
        if row["region"] not in region_index:
            bad.append(f"row {lineno}: unknown region {row['region']!r}")
            continue
        if t + row["horizon"] > panel.num_steps - 1:
            bad.append(f"row {lineno}: target beyond the end of the panel")
            continue
        j = region_index[row["region"]]
        if panel.missing_mask[t + row["horizon"], j] or panel.missing_mask[t, j]:
            bad.append(f"row {lineno}: truth or reference cell is missing in the panel")
            continue
        key = (row["origin"], row["horizon"], row["region"])
        if key in seen:
            bad.append(f"row {lineno}: duplicate key {key}")
            continue
        seen.add(key)
        truth = float(panel.values[t + row["horizon"], j])
        naive_ref = float(panel.values[t, j])
        if has_truth:
            if not _close(row["truth"], truth) or not _close(row["naive_reference"], naive_ref):
                bad.append(f"row {lineno}: truth mismatch vs panel "
                           f"(file {row['truth']}, panel {truth})")
                continue
        records.append(ForecastRecord(
            origin=row["origin"], horizon=row["horizon"], region=row["region"],
            prediction=row["prediction"], truth=truth, naive_reference=naive_ref,
        ))
    if bad:
        raise ValueError(f"{records_path}: invalid records:\n  " + "\n  ".join(bad))
    records.sort(key=lambda r: (r.horizon, r.origin, r.region))
    return score_records(
        records, annotations, config.frequency,
        dataset_id=config.dataset_id, model_kind="external",
        patch_ids=(), seed=config.seed,
        statistics=config.bootstrap_statistics, replicates=config.bootstrap_replicates,
    )


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))
