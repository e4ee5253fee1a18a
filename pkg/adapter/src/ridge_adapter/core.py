"""Reference external forecaster for the file-based task protocol.

Reads per-round task bundles (manifest.json, train_panel.csv,
eval_inputs.csv, targets.csv), fits one ridge regression per region from
its own lookback lags to the lead-h target, and writes forecasts in the
prediction-rows schema (`origin,horizon,region,prediction`). Everything is
closed form, so outputs are deterministic.

Swapping in a different learner only requires replacing ``fit_node`` /
``predict_node``; the protocol surface (which files are read, which rows
are written) stays as is. For example, a deep model would fit on the same
``(window, target)`` pairs and fill the same target grid:

    class MyModel:
        def fit(self, X, y): ...          # X: (rows, lookback), y: (rows,)
        def predict(self, X): ...         # X: (rows, lookback)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

MODES = ("ridge", "naive")


@dataclass(frozen=True)
class AdapterConfig:
    tasks_dir: str
    output_path: str
    ridge_lambda: float = 1.0
    mode: str = "ridge"
    seed: int = 0  # reserved; the closed-form fit needs no randomness

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class TaskBundle:
    path: Path
    round_index: int
    lookback: int
    horizons: tuple[int, ...]
    regions: tuple[str, ...]
    train_dates: tuple[date, ...]
    train_values: np.ndarray                       # (T_window, n), NaN = missing
    eval_windows: dict[date, np.ndarray]           # origin -> (lookback, n)
    targets: tuple[tuple[date, int], ...]          # (origin, horizon) pairs to fill


def _read_manifest(bundle_dir: Path) -> dict:
    manifest_path = bundle_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed manifest in bundle {bundle_dir}: {exc}") from exc
    for key in ("round_index", "lookback", "horizons", "regions", "eval_origins"):
        if key not in manifest:
            raise ValueError(f"malformed manifest in bundle {bundle_dir}: missing {key!r}")
    return manifest


def load_bundle(bundle_dir: str | Path) -> TaskBundle:
    bundle_dir = Path(bundle_dir)
    manifest = _read_manifest(bundle_dir)
    regions = tuple(manifest["regions"])
    region_idx = {r: j for j, r in enumerate(regions)}
    lookback = int(manifest["lookback"])

    cells: dict[tuple[date, str], float] = {}
    with open(bundle_dir / "train_panel.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cells[(date.fromisoformat(row["date"]), row["region"])] = float(row["value"])
    train_dates = tuple(sorted({d for d, _ in cells}))
    values = np.full((len(train_dates), len(regions)), np.nan)
    date_idx = {d: t for t, d in enumerate(train_dates)}
    for (day, region), value in cells.items():
        values[date_idx[day], region_idx[region]] = value

    windows: dict[date, dict[date, np.ndarray]] = {}
    with open(bundle_dir / "eval_inputs.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            origin = date.fromisoformat(row["origin"])
            day = date.fromisoformat(row["date"])
            windows.setdefault(origin, {}).setdefault(day, np.full(len(regions), np.nan))
            windows[origin][day][region_idx[row["region"]]] = float(row["value"])
    eval_windows = {}
    for origin, by_day in windows.items():
        days = sorted(by_day)
        if len(days) != lookback:
            raise ValueError(
                f"bundle {bundle_dir}: origin {origin} has {len(days)} input rows, "
                f"expected lookback {lookback}"
            )
        eval_windows[origin] = np.stack([by_day[d] for d in days])

    targets: list[tuple[date, int]] = []
    with open(bundle_dir / "targets.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pair = (date.fromisoformat(row["origin"]), int(row["horizon"]))
            if pair not in targets:
                targets.append(pair)

    return TaskBundle(
        path=bundle_dir,
        round_index=int(manifest["round_index"]),
        lookback=lookback,
        horizons=tuple(int(h) for h in manifest["horizons"]),
        regions=regions,
        train_dates=train_dates,
        train_values=values,
        eval_windows=eval_windows,
        targets=tuple(targets),
    )


def fit_node(X: np.ndarray, y: np.ndarray, ridge_lambda: float) -> tuple[np.ndarray, float]:
    """Ridge with an unpenalized intercept via centering.

    As ridge_lambda grows the weights shrink to zero and predictions fall
    back to the training-target mean.
    """
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    if ridge_lambda == 0.0:
        w, *_ = np.linalg.lstsq(Xc, yc, rcond=None)
    else:
        L = X.shape[1]
        w = np.linalg.solve(Xc.T @ Xc + ridge_lambda * np.eye(L), Xc.T @ yc)
    return w, y_mean - float(w @ x_mean)


def predict_node(window: np.ndarray, w: np.ndarray, intercept: float) -> float:
    return float(w @ window + intercept)


def _training_pairs(bundle: TaskBundle, horizon: int, node: int):
    """(window, target) pairs for one region, windows fully observed."""
    values = bundle.train_values[:, node]
    L = bundle.lookback
    X, y = [], []
    for t in range(L - 1, len(bundle.train_dates) - horizon):
        window = values[t - L + 1 : t + 1]
        target = values[t + horizon]
        if np.isnan(window).any() or np.isnan(target):
            continue
        X.append(window)
        y.append(target)
    return np.array(X), np.array(y)


def forecast_bundle(bundle: TaskBundle, config: AdapterConfig) -> list[tuple[date, int, str, float]]:
    rows: list[tuple[date, int, str, float]] = []
    if config.mode == "naive":
        for origin, horizon in bundle.targets:
            window = bundle.eval_windows[origin]
            for j, region in enumerate(bundle.regions):
                if np.isnan(window[:, j]).any():
                    continue
                rows.append((origin, horizon, region, float(window[-1, j])))
        return rows

    models: dict[tuple[int, int], tuple[np.ndarray, float]] = {}
    for horizon in bundle.horizons:
        for j in range(len(bundle.regions)):
            X, y = _training_pairs(bundle, horizon, j)
            if X.shape[0] < 2:
                continue
            models[(horizon, j)] = fit_node(X, y, config.ridge_lambda)
    for origin, horizon in bundle.targets:
        window = bundle.eval_windows[origin]
        for j, region in enumerate(bundle.regions):
            model = models.get((horizon, j))
            if model is None or np.isnan(window[:, j]).any():
                continue
            rows.append((origin, horizon, region, predict_node(window[:, j], *model)))
    return rows


def run_adapter(config: AdapterConfig) -> str:
    """Process every bundle under the tasks directory; returns the output
    path. Rows are sorted for byte-stable output."""
    tasks_dir = Path(config.tasks_dir)
    bundle_dirs = sorted(p for p in tasks_dir.glob("round_*") if p.is_dir())
    if not bundle_dirs:
        raise ValueError(f"no task bundles under {tasks_dir}")
    rows: list[tuple[date, int, str, float]] = []
    for bundle_dir in bundle_dirs:
        rows.extend(forecast_bundle(load_bundle(bundle_dir), config))
    rows.sort(key=lambda r: (r[1], r[0], r[2]))
    out = Path(config.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "horizon", "region", "prediction"])
        for origin, horizon, region, pred in rows:
            writer.writerow([origin.isoformat(), horizon, region, repr(pred)])
    return str(out)
