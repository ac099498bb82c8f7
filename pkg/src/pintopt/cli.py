"""Command line entry point: ``pintopt run <config> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ExperimentFailed, InvalidConfig
from .harness import KINDS, ResultBundle, parse_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pintopt", description="Time-parallel One-shot optimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="path to a 'key = value' config file")
    run.add_argument("--kind", choices=KINDS, help="experiment kind (overrides the file)")
    run.add_argument("--workers", help="worker count, or a comma-separated list for scaling runs")
    run.add_argument("--out", help="output directory (overrides the file)")
    run.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE", help="override any config key; repeatable"
    )
    run.add_argument("--no-figures", action="store_true", help="write CSV files only")
    run.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    return parser


def _print_summary(bundle: ResultBundle):
    cols = bundle.summary_columns
    if not cols:
        return
    print(",".join(cols))
    for row in bundle.summary:
        print(",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]) for c in cols))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = list(args.override)
    if args.kind:
        overrides.append(f"kind={args.kind}")
    if args.workers:
        overrides.append(f"workers={args.workers}")
    if args.out:
        overrides.append(f"out={args.out}")
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_config(text, overrides)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        bundle = run_experiment(cfg)
    except ExperimentFailed as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if exc.partial is not None:
            exc.partial.write(cfg.out, figures=not args.no_figures)
            print(f"partial results written to {cfg.out}", file=sys.stderr)
        return EXIT_SOLVER
    paths = bundle.write(cfg.out, figures=not args.no_figures)
    _print_summary(bundle)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
