"""Sweep one hybrid_branch setting on the toy benchmark (K, T, lam or sharing).

    python scripts/ablate.py K 0 1 2 6 --seeds 2
    python scripts/ablate.py sharing all heads_unshared decoder_unshared
"""
import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from hybridmatch.config import ExperimentConfig, load_config
from hybridmatch.experiments import run, with_overrides

PARSE = {"K": int, "T": int, "lam": float, "sharing": str}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("field", choices=sorted(PARSE))
    ap.add_argument("values", nargs="+")
    ap.add_argument("--config", help="base config; defaults to the toy benchmark")
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default=None, help="CSV path (default runs/ablate_<field>.csv)")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.epochs:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    out = Path(args.out or f"runs/ablate_{args.field}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)

    rows = []
    for raw in args.values:
        value = PARSE[args.field](raw)
        for seed in range(args.seeds):
            res = run(with_overrides(cfg, "hybrid_branch", seed, **{args.field: value}))
            o2m = res.reports.get("one2many_nms")
            rows.append([value, seed, res.reports["one2one_nonms"].ap50, None if o2m is None else o2m.ap50,
                         res.final.val_one2one_total, round(res.seconds, 1)])
            print(f"{args.field}={value} seed={seed} ap50={rows[-1][2]} one2many_nms_ap50={rows[-1][3]} "
                  f"val_loss={rows[-1][4]:.4f}")
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.field, "seed", "ap50_one2one", "ap50_one2many_nms", "val_one2one_total", "seconds"])
        w.writerows(rows)

    for raw in args.values:
        value = PARSE[args.field](raw)
        sel = [r for r in rows if r[0] == value]
        ap50 = np.mean([np.nan if r[2] is None else r[2] for r in sel])
        print(f"{args.field}={value}: mean AP50 {ap50:.4f}, mean val loss {np.mean([r[4] for r in sel]):.4f}")


if __name__ == "__main__":
    main()
