"""Score-table rendering: aligned text, tidy CSV, and plot-ready CSV."""

from __future__ import annotations

import csv
from pathlib import Path

METRIC_COLUMNS = ("count", "mse", "mae", "rmse", "med_ae", "med_se",
                  "win_rate", "mean_signed_error", "relative_rmse_vs_naive")


def _fmt(value, width: int = 10) -> str:
    if value is None:
        return "-".rjust(width)
    if isinstance(value, int):
        return str(value).rjust(width)
    if value != value:  # NaN
        return "nan".rjust(width)
    if value == float("inf"):
        return "inf".rjust(width)
    return f"{value:.3f}".rjust(width) if abs(value) < 1e5 else f"{value:.3e}".rjust(width)


def _grid_view(table_dict: dict, metric: str, title: str) -> str:
    rows = table_dict["rows"]
    horizons = sorted({r["horizon"] for r in rows if r["horizon"] != "pooled"})
    strata = [s for s in ("all", "outbreak", "non_outbreak", "filtered")
              if any(r["stratum"] == s for r in rows)]
    lookup = {(r["horizon"], r["stratum"]): r for r in rows}
    out = [title]
    out.append("horizon".rjust(8) + "".join(s.rjust(14) for s in strata))
    for h in horizons + ["pooled"]:
        line = str(h).rjust(8)
        for s in strata:
            row = lookup.get((h, s))
            line += _fmt(None if row is None else row.get(metric), 14)
        out.append(line)
    return "\n".join(out)


def render_text(table_dict: dict) -> str:
    """Aligned-text report: relative-RMSE and win-rate grids plus the full
    metric table per cell."""
    header = (f"dataset={table_dict['dataset']}  model={table_dict['model']}  "
              f"patches={','.join(table_dict['patches']) or 'none'}  seed={table_dict['seed']}")
    parts = [header, ""]
    parts.append(_grid_view(table_dict, "relative_rmse_vs_naive",
                            "RMSE relative to the persistence baseline (1.0 = equal error)"))
    parts.append("")
    parts.append(_grid_view(table_dict, "win_rate",
                            "Win rate vs the persistence baseline (higher is better)"))
    parts.append("")
    parts.append("All metrics")
    head = "horizon".rjust(8) + "stratum".rjust(14)
    head += "".join(c.rjust(12) for c in METRIC_COLUMNS)
    parts.append(head)
    for row in table_dict["rows"]:
        line = str(row["horizon"]).rjust(8) + row["stratum"].rjust(14)
        for c in METRIC_COLUMNS:
            line += _fmt(row[c], 12)
        parts.append(line)
    if table_dict.get("notes"):
        parts.append("")
        parts.append("notes:")
        parts.extend(f"  - {n}" for n in table_dict["notes"])
    return "\n".join(parts) + "\n"


def write_metrics_csv(table_dict: dict, path: str | Path) -> None:
    """Tidy per-cell CSV of all scalar metrics."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon", "stratum", *METRIC_COLUMNS])
        for row in table_dict["rows"]:
            writer.writerow([row["horizon"], row["stratum"],
                             *(row[c] for c in METRIC_COLUMNS)])


def write_plot_csv(table_dict: dict, path: str | Path) -> None:
    """Long-format plot data: one row per (horizon, stratum, metric) with
    bootstrap bounds where available."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon", "stratum", "metric", "value", "lower", "upper"])
        for row in table_dict["rows"]:
            for metric in METRIC_COLUMNS[1:]:
                est = (row.get("intervals") or {}).get(metric)
                lower = est["lower"] if est else ""
                upper = est["upper"] if est else ""
                writer.writerow([row["horizon"], row["stratum"], metric,
                                 row[metric], lower, upper])
