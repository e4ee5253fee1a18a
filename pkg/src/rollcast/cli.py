"""Command-line entry point.

Subcommands: ingest, annotate, run, score, export-tasks, report.
Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import report as reportmod
from .engine import RunConfig, grid_search, load_run_config, plans_to_json, run_benchmark, score_external
from .graph import load_adjacency, row_normalize
from .metrics import write_records
from .outbreaks import annotate_rising, load_annotations, save_annotations
from .panel import load_panel, load_population
from .taskio import export_task_bundles

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="rollcast",
                     description="Rolling-origin benchmark engine for regional epidemic forecasting")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate panel/adjacency/population files")
    p.add_argument("--panel", required=True)
    p.add_argument("--frequency", required=True, choices=["daily", "weekly"])
    p.add_argument("--adjacency")
    p.add_argument("--population")

    p = sub.add_parser("annotate", help="write rising-interval annotations for a panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--frequency", required=True, choices=["daily", "weekly"])
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="execute a benchmark run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's output directory")

    p = sub.add_parser("score", help="score an external forecaster's records CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", help="directory for scoretable.json (defaults next to records)")

    p = sub.add_parser("export-tasks", help="write per-round task bundles for external models")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="render a score table to text/CSV views")
    p.add_argument("--scoretable", required=True)
    p.add_argument("--out", help="directory for report.txt/metrics.csv/plotdata.csv")
    return parser


def _load_inputs(config: RunConfig):
    panel = load_panel(config.panel_path, config.frequency)
    mixing = None
    if config.adjacency_path:
        mixing = row_normalize(load_adjacency(config.adjacency_path, panel.regions))
    populations = None
    if config.population_path:
        populations = load_population(config.population_path, panel.regions)
    annotations = None
    if config.annotations_path:
        annotations = load_annotations(config.annotations_path, panel)
    return panel, mixing, populations, annotations


def _cmd_ingest(args) -> int:
    panel = load_panel(args.panel, args.frequency)
    print(f"panel: {panel.num_steps} steps x {panel.num_regions} regions, "
          f"{panel.dates[0]} .. {panel.dates[-1]}, "
          f"{int(panel.missing_mask.sum())} missing cells")
    if args.adjacency:
        adjacency = load_adjacency(args.adjacency, panel.regions)
        print(f"adjacency: {int((adjacency.weights != 0).sum())} edges")
    if args.population:
        pops = load_population(args.population, panel.regions)
        print(f"population: {pops.populations.min():.0f} .. {pops.populations.max():.0f}")
    return EXIT_OK


def _cmd_annotate(args) -> int:
    panel = load_panel(args.panel, args.frequency)
    annotations = annotate_rising(panel, args.window, args.alpha)
    save_annotations(annotations, args.out)
    print(f"wrote {len(annotations.intervals)} intervals to {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    config = load_run_config(args.config)
    out_dir = Path(args.out or config.output_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    panel, mixing, populations, annotations = _load_inputs(config)
    started = time.monotonic()
    selection_report = None
    if config.grid:
        config, selection_report = grid_search(config, panel, mixing, populations)
    run = run_benchmark(config, panel, mixing, populations, annotations)
    write_records(run.records, out_dir / "records.csv")
    (out_dir / "scoretable.json").write_text(run.score_table.to_json())
    (out_dir / "plans.json").write_text(
        json.dumps(plans_to_json(run.plans, panel), indent=2, sort_keys=True))
    diagnostics = dict(run.diagnostics)
    diagnostics["runtime_seconds"] = round(time.monotonic() - started, 3)
    if selection_report is not None:
        diagnostics["grid_search"] = selection_report
    (out_dir / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True))
    failures = run.diagnostics["failures"]
    print(f"run complete: {len(run.records)} records over {len(run.plans)} rounds"
          + (f", {len(failures)} failed fits" if failures else ""))
    print(f"outputs in {out_dir}")
    return EXIT_OK


def _cmd_score(args) -> int:
    config = load_run_config(args.config)
    panel, _, _, annotations = _load_inputs(config)
    if annotations is None:
        annotations = annotate_rising(panel, config.annotate_window, config.annotate_alpha)
    table = score_external(args.records, panel, annotations, config)
    out_dir = Path(args.out) if args.out else Path(args.records).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scoretable.json").write_text(table.to_json())
    print(f"scored {sum(r.count for r in table.rows if r.stratum == 'all' and r.horizon != 'pooled')} "
          f"records; scoretable.json in {out_dir}")
    return EXIT_OK


def _cmd_export_tasks(args) -> int:
    config = load_run_config(args.config)
    panel, _, _, _ = _load_inputs(config)
    bundles = export_task_bundles(config, panel, args.out, force=args.force)
    print(f"wrote {len(bundles)} task bundles to {args.out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    table_dict = json.loads(Path(args.scoretable).read_text())
    text = reportmod.render_text(table_dict)
    print(text, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text)
        reportmod.write_metrics_csv(table_dict, out_dir / "metrics.csv")
        reportmod.write_plot_csv(table_dict, out_dir / "plotdata.csv")
        print(f"report files in {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "annotate": _cmd_annotate,
    "run": _cmd_run,
    "score": _cmd_score,
    "export-tasks": _cmd_export_tasks,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"rollcast {args.command}: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"rollcast {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
