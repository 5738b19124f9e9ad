"""``fdmc-alloc`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .baselines import EnumerationTooLarge
from .bench import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURES = 3
EXIT_SIZE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdmc-alloc",
        description="Full-duplex multicarrier power and subcarrier allocation experiments.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value experiment file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", metavar="PATH", help="output CSV (default: stdout)")
    common.add_argument("--preset", choices=bench.PRESETS, help="solver preset")
    common.add_argument("--trace", metavar="PATH", help="per-iteration TSV trace")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one drop and print a report")
    sub.add_parser("sweep-power", parents=[common], help="throughput versus DL budget")
    sub.add_parser("sweep-users", parents=[common], help="throughput versus K = J")
    sub.add_parser("oracle-check", parents=[common], help="compare with the grid oracle")
    dump = sub.add_parser("dump-channels", parents=[common], help="write one drop's gains")
    dump.add_argument("--trial", type=int, default=0, help="trial index of the drop")
    return parser


def _load(args) -> ExperimentConfig:
    overrides = dict(master_seed=args.seed, preset=args.preset, output=args.out,
                     trace=args.trace)
    if args.config:
        return bench.load_config(args.config, **overrides)
    return bench.parse_config("", **overrides)


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _check_failures(result) -> int:
    rate = result.failure_rate()
    if rate > bench.FAILURE_LIMIT:
        print(f"error: {result.failures} of {result.attempts} runs failed ({rate:.1%})",
              file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "solve":
            inst = bench.make_instance(config, 0)
            out = bench.run_scheme(inst, "proposed", config)
            if out.report is None:
                print("error: solver failed", file=sys.stderr)
                return EXIT_FAILURES
            sys.stderr.write(bench.format_report(inst, out.report, config))
            _emit(bench.allocation_to_csv(inst, out.allocation), config.output)
            if config.trace:
                Path(config.trace).write_text(out.report.trace_tsv())
            return EXIT_OK
        if args.command in ("sweep-power", "sweep-users"):
            run = bench.run_power_sweep if args.command == "sweep-power" else bench.run_user_sweep
            result = run(config)
            _emit(bench.rows_to_csv(result.rows), config.output)
            if config.trace:
                Path(config.trace).write_text(bench.traces_to_tsv(result.traces))
            return _check_failures(result)
        if args.command == "oracle-check":
            check = bench.run_oracle_check(config)
            _emit(bench.oracle_to_csv(check), config.output)
            total = len(check.rows) + check.failures
            if total and check.failures / total > bench.FAILURE_LIMIT:
                return EXIT_FAILURES
            return EXIT_OK
        if args.command == "dump-channels":
            inst = bench.make_instance(config, args.trial)
            _emit(inst.gains.to_csv(), config.output)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnumerationTooLarge as exc:
        print(f"size error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
