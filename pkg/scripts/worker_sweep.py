#!/usr/bin/env python3
"""KKT noise floor against worker count for majority vote and averaging.

Writes one CSV row per (method, seed, workers) and prints the per-N means.

    python scripts/worker_sweep.py --workers 4 8 16 32 64 --seeds 0 1 2 3 4
"""

import argparse
import csv
import sys

import numpy as np

from distlion.experiments import worker_sweep


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=int, nargs="+", default=[4, 64])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--rounds", type=int, default=5000)
    p.add_argument("--methods", nargs="+", default=["d_lion_mavo", "d_lion_avg"])
    p.add_argument("--csv", default="worker_sweep.csv")
    args = p.parse_args(argv)

    res = worker_sweep(args.methods, args.workers, args.seeds, args.rounds)
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "workers", "kkt_noise_floor"])
        for row in res.rows():
            w.writerow([row[0], row[1], row[2], repr(row[3])])
    print("method".ljust(14) + "".join(f"N={n}".rjust(12) for n in res.workers))
    for method, table in res.floors.items():
        print(method.ljust(14) + "".join(f"{v:12.5f}" for v in np.mean(table, axis=0)))
    print(f"wrote {args.csv}", file=sys.stderr)


if __name__ == "__main__":
    main()
