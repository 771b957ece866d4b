"""Command line entry point: ``hybridmatch {run,verify,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .assignment import bench
from .config import load_config
from .errors import ConfigError, HybridMatchError
from .verify import FAULTS, SUITE_NAMES, run_suite

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
BENCH_FIELDS = ("rows", "cols", "batches", "seed", "min_ms", "median_ms", "p99_ms", "solves_per_sec")

log = logging.getLogger("hybridmatch")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {text}")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one toy experiment")
    r.add_argument("--config", required=True, type=Path, help="TOML or JSON experiment config")
    r.add_argument("--seed", type=_u64, help="override the config's top-level seed")
    r.add_argument("--out", type=Path, help="override the config's output directory")

    v = sub.add_parser("verify", help="run property and oracle suites")
    v.add_argument("--suite", default="all", choices=SUITE_NAMES)
    v.add_argument("--inject", choices=FAULTS, help="plant a known fault (the suite must then fail)")

    b = sub.add_parser("bench", help="time the assignment solver")
    b.add_argument("--rows", type=_positive, default=300)
    b.add_argument("--cols", type=_positive, default=30)
    b.add_argument("--batches", type=_positive, default=1000)
    b.add_argument("--seed", type=_u64, default=0)
    b.add_argument("--out", type=Path, help="directory for bench.csv (stdout only when omitted)")
    return p


def cmd_run(args) -> int:
    from .experiments import run, write_artifacts

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=str(args.out))
    log.info("running %s (seed %d) into %s", cfg.hybrid.scheme, cfg.seed, cfg.out)
    result = run(cfg, on_epoch=lambda e: log.info("epoch %d: train %.4f val %.4f AP50 %.4f", e.epoch,
                                                  e.train_total, e.val_one2one_total, e.val_AP50))
    write_artifacts(result, cfg.out)
    print(result.summary())
    return EXIT_OK


def bench_csv(report: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(BENCH_FIELDS)
    wr.writerow([report[k] if isinstance(report[k], int) else repr(report[k]) for k in BENCH_FIELDS])
    return buf.getvalue()


def cmd_bench(args) -> int:
    text = bench_csv(bench(args.rows, args.cols, args.batches, args.seed))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bench.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    return EXIT_OK if run_suite(args.suite, inject=args.inject) else EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "verify": cmd_verify, "bench": cmd_bench}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HybridMatchError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
