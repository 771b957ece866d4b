"""Baseline vs. hybrid_branch on the default toy benchmark, one row per seed.

    python scripts/desk_benchmark.py --seeds 5 --out runs/desk_benchmark.csv
"""
import argparse
import csv
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from hybridmatch.config import ExperimentConfig, load_config
from hybridmatch.experiments import BenchmarkRow, directional_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="base config; defaults to the toy benchmark")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, help="override the epoch count")
    ap.add_argument("--out", default="runs/desk_benchmark.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.epochs:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    t0 = time.perf_counter()
    rows = directional_benchmark(cfg, range(args.seeds))
    seconds = time.perf_counter() - t0

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in dataclasses.fields(BenchmarkRow)]
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in rows:
            w.writerow([repr(getattr(r, n)) for n in names])

    mean = {n: float(np.mean([getattr(r, n) for r in rows])) for n in names[1:]}
    wins = sum(r.hybrid_val_loss <= r.baseline_val_loss for r in rows)
    print(f"baseline AP50          {mean['baseline_ap50']:.4f}")
    print(f"hybrid one-to-one AP50 {mean['hybrid_ap50']:.4f}")
    print(f"one-to-many + NMS AP50 {mean['hybrid_one2many_nms_ap50']:.4f}")
    print(f"hybrid val loss <= baseline in {wins}/{len(rows)} seeds")
    print(f"{seconds:.0f}s, rows written to {out}")


if __name__ == "__main__":
    main()
