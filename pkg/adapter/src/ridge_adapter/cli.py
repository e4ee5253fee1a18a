"""Command-line wrapper: ridge-adapter --tasks DIR --out FILE [options]."""

from __future__ import annotations

import argparse
import sys

from .core import MODES, AdapterConfig, run_adapter


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ridge-adapter",
        description="Fit per-region ridge forecasts from rollcast task bundles",
    )
    parser.add_argument("--tasks", required=True, help="directory of round_* bundles")
    parser.add_argument("--out", required=True, help="output forecasts CSV")
    parser.add_argument("--ridge-lambda", type=float, default=1.0)
    parser.add_argument("--mode", choices=MODES, default="ridge")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    try:
        out = run_adapter(AdapterConfig(tasks_dir=args.tasks, output_path=args.out,
                                        ridge_lambda=args.ridge_lambda, mode=args.mode,
                                        seed=args.seed))
    except (ValueError, OSError) as exc:
        print(f"ridge-adapter: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
