#!/usr/bin/env python3
"""Train every ablation row over several seeds and print a Table-2 style summary.

    python scripts/run_ablation.py --seeds 0 1 2 --out results/ablation.json

Runs go to a process pool sized by --workers (default: DACL_THREADS or the
CPU count).
"""

import argparse
import json
import sys
from dataclasses import asdict

from dacl.config import ABLATION_ROWS
from dacl.experiments import ROW_ORDER, directional_checks, run_grid


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rows", nargs="+", default=list(ROW_ORDER), choices=ROW_ORDER)
    ap.add_argument("--scenes", type=int, default=100)
    ap.add_argument("--labeled-frac", type=float, default=0.05)
    ap.add_argument("--iters", type=int, default=None, help="override the config's iteration count")
    ap.add_argument("--config", default=None, help="key = value file (default: desk-scale settings)")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", default=None, help="write raw runs and summary as JSON")
    args = ap.parse_args(argv)

    def progress(r):
        print(f"  {r.ablation:>8s} seed={r.seed} dice={r.macro['dice']:.2f} ({r.seconds:.0f}s)",
              file=sys.stderr, flush=True)

    grid = run_grid([ABLATION_ROWS[r] for r in args.rows], args.seeds, args.scenes, args.labeled_frac,
                    args.iters, args.config, args.workers, progress)
    summary = grid.summary()
    print(f"{'row':4s} {'ablation':>9s} {'dice':>14s} {'silhouette':>11s} {'DB':>7s} {'V':>7s}")
    for row, s in summary.items():
        c = s["compactness"]
        print(f"{row:4s} {s['ablation']:>9s} {s['dice_mean']:7.2f} ± {s['dice_std']:4.2f} "
              f"{c.get('silhouette', float('nan')):11.3f} {c.get('davies_bouldin', float('nan')):7.3f} "
              f"{c.get('v_measure', float('nan')):7.3f}")
    print(f"wall time {grid.wall_seconds:.0f}s")
    checks = directional_checks(grid) if {"I", "VI"} <= set(summary) and len(summary) == 6 else None
    if checks:
        print(f"VI - I = {checks['gain']:+.2f} Dice; monotone within pooled std: {checks['monotone_ok']}; "
              f"compactness better on all three: {checks['compactness_ok']}")
    if args.out:
        payload = {"runs": [asdict(r) for r in grid.runs], "summary": summary,
                   "wall_seconds": grid.wall_seconds, "checks": checks}
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
