"""Command-line runner: ``rostlab <experiment> --config PATH [--seed U64] ...``.

Exit status: 0 when every assertion of the experiment holds, 1 on a
statistical rejection, 2 on invalid input or a structural error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import RostError
from .experiments import PIPELINES, ConfigError, ExperimentConfig, report_json, run_experiment, write_outputs

EXIT_PASS, EXIT_REJECT, EXIT_ERROR = 0, 1, 2

log = logging.getLogger("rostlab")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rostlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in PIPELINES:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=_u64, help="override the root seed")
        p.add_argument("--replicas", type=_positive, help="override the replica count")
        p.add_argument("--out", help="directory for the JSON report and CSV tables")
        p.add_argument("--threads", type=_positive, help="worker threads for replica batches")
        p.add_argument("--no-csv", action="store_true", help="skip CSV tables")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"config describes {cfg.experiment!r}, not {args.experiment!r}")
        cfg = cfg.with_overrides(args.seed, args.replicas, args.threads, args.out)
        report = run_experiment(cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except RostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out_dir = cfg.output.get("dir")
    if out_dir:
        for path in write_outputs(report, out_dir, csv_tables=not args.no_csv and cfg.output.get("csv", True)):
            log.info("wrote %s", path)
    else:
        sys.stdout.write(report_json(report) + "\n")
    status = "PASS" if report["passed"] else "REJECT"
    print(f"{cfg.experiment}: {status} (seed {cfg.seed}, config {cfg.hash()[:12]})", file=sys.stderr)
    return EXIT_PASS if report["passed"] else EXIT_REJECT


if __name__ == "__main__":
    sys.exit(main())
