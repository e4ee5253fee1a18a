"""File-based task bundles for external (plug-in) forecasters.

One directory per retraining round gives an external model everything the
in-process models see and nothing more:

* ``manifest.json``  — round geometry: window, eval origins, horizons, lookback.
* ``train_panel.csv`` — the training-window slice (nothing after the window end).
* ``eval_inputs.csv`` — per evaluation origin, the lookback rows available
  *at that origin* (column ``origin`` says when each row became usable).
* ``targets.csv``    — the (origin, horizon, region) grid to fill, with the
  target's calendar indicator.
* ``adjacency.csv`` / ``population.csv`` — copied through when provided.

The leakage scan enforces per-origin availability: training rows never
exceed the window end and an origin's input rows never exceed the origin.
"""

from __future__ import annotations

import csv
import json
import shutil
from datetime import date
from pathlib import Path

from .engine import RoundPlan, RunConfig, plan_rounds
from .panel import PanelDataset, calendar_code


def export_task_bundles(
    config: RunConfig,
    panel: PanelDataset,
    out_dir: str | Path,
    force: bool = False,
) -> list[Path]:
    """Write one TaskBundle directory per round; returns bundle paths."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ValueError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    plans = plan_rounds(panel, config.lookback, config.cadence, config.train_size,
                        config.horizons)
    bundles = []
    for plan in plans:
        bundle = out / f"round_{plan.round_index:03d}"
        bundle.mkdir()
        _write_bundle(bundle, plan, panel, config)
        bundles.append(bundle)
    scan_bundle_leakage(out)
    return bundles


def _write_bundle(bundle: Path, plan: RoundPlan, panel: PanelDataset, config: RunConfig) -> None:
    manifest = {
        "round_index": plan.round_index,
        "frequency": panel.frequency,
        "lookback": config.lookback,
        "horizons": list(plan.horizons),
        "train_window": {
            "start": panel.dates[plan.window_start].isoformat(),
            "end": panel.dates[plan.window_end].isoformat(),
        },
        "eval_origins": [panel.dates[t].isoformat() for t in plan.eval_origins],
        "regions": list(panel.regions),
    }
    (bundle / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    with open(bundle / "train_panel.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "region", "value"])
        for t in range(plan.window_start, plan.window_end + 1):
            for j, region in enumerate(panel.regions):
                if not panel.missing_mask[t, j]:
                    writer.writerow([panel.dates[t].isoformat(), region,
                                     repr(float(panel.values[t, j]))])

    with open(bundle / "eval_inputs.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "date", "region", "value"])
        for t in plan.eval_origins:
            for u in range(t - config.lookback + 1, t + 1):
                for j, region in enumerate(panel.regions):
                    if not panel.missing_mask[u, j]:
                        writer.writerow([
                            panel.dates[t].isoformat(), panel.dates[u].isoformat(),
                            region, repr(float(panel.values[u, j])),
                        ])

    with open(bundle / "targets.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "horizon", "region", "calendar_indicator"])
        for t in plan.eval_origins:
            for h in plan.horizons:
                if t + h > panel.num_steps - 1:
                    continue
                code = calendar_code(panel.dates[t + h], panel.frequency)
                for region in panel.regions:
                    writer.writerow([panel.dates[t].isoformat(), h, region, code])

    for src, name in ((config.adjacency_path, "adjacency.csv"),
                      (config.population_path, "population.csv")):
        if src:
            shutil.copyfile(src, bundle / name)


def scan_bundle_leakage(tasks_dir: str | Path) -> None:
    """Verify the availability invariant over every bundle.

    Training rows must not postdate the training-window end; an evaluation
    origin's input rows must not postdate that origin. Raises on the first
    violation.
    """
    for bundle in sorted(Path(tasks_dir).glob("round_*")):
        manifest = json.loads((bundle / "manifest.json").read_text())
        window_end = date.fromisoformat(manifest["train_window"]["end"])
        with open(bundle / "train_panel.csv", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                if date.fromisoformat(row["date"]) > window_end:
                    raise ValueError(
                        f"{bundle}: training row at {row['date']} leaks past window end {window_end}"
                    )
        with open(bundle / "eval_inputs.csv", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                if date.fromisoformat(row["date"]) > date.fromisoformat(row["origin"]):
                    raise ValueError(
                        f"{bundle}: input row at {row['date']} leaks past origin {row['origin']}"
                    )
