"""``flatcomp <command> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PIPELINES, ConfigError, load_config
from .report import ReportError, report
from .runner import run

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatcomp", description="Train flat, then compress.")
    p.add_argument("command", choices=PIPELINES + ("report",))
    p.add_argument("records", nargs="*", help="report only: records.csv paths or globs")
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int, action="append",
                   help="run only this seed (repeatable); overrides experiment.seeds")
    p.add_argument("--out", help="output directory; overrides experiment.out")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        patterns = list(args.records)
        out = args.out
        if not patterns:
            print("flatcomp report: give records.csv paths or globs", file=sys.stderr)
            return EXIT_CONFIG
        try:
            written = report(patterns, out or ".")
        except ReportError as exc:
            print(f"flatcomp report: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for path in written:
            print(path)
        return EXIT_OK

    if not args.config:
        print(f"flatcomp {args.command}: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_("experiment", pipeline=args.command)
        if args.seed:
            cfg = cfg.with_("experiment", seeds=tuple(args.seed))
    except ConfigError as exc:
        print(f"flatcomp: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else cfg.out
    try:
        summary = run(cfg, out)
    except Exception as exc:  # anything escaping the per-seed isolation
        print(f"flatcomp {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(f"{len(summary.records)} records -> {out / 'records.csv'} (config {cfg.hash()})")
    for opt, seed, err in summary.failures:
        print(f"  failed: optimizer={opt} seed={seed}: {err}", file=sys.stderr)
    return EXIT_OK if summary.ok else EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
