#!/usr/bin/env python3
"""Two-class logistic comparison of D-Lion against the baselines.

By default uses the stored per-method learning rates on the evaluation seeds.
``--tune`` first re-runs the learning-rate grid search on the held-out tuning
seeds and evaluates with its choices; ``--defaults`` uses the per-method
default learning rates unchanged.

    python scripts/desk_comparison.py
    python scripts/desk_comparison.py --tune
"""

import argparse
import json

from distlion.config import METHOD_DEFAULTS
from distlion.experiments import COMPARISON_METHODS, LR_GRID, TUNING_SEEDS, desk_comparison, tune_learning_rates


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--rounds", type=int, default=2000)
    p.add_argument("--methods", nargs="+", default=list(COMPARISON_METHODS))
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--tune", action="store_true", help="grid-search the learning rates first")
    mode.add_argument("--defaults", action="store_true", help="per-method default learning rates")
    p.add_argument("--json", help="write the results here")
    args = p.parse_args(argv)

    lrs = None
    if args.tune:
        lrs, table = tune_learning_rates(args.methods, LR_GRID, TUNING_SEEDS, args.rounds, log=print)
        print("chosen:", json.dumps(lrs))
    elif args.defaults:
        lrs = {m: METHOD_DEFAULTS[m][0] for m in args.methods}

    res = desk_comparison(args.methods, args.seeds, lrs, args.rounds)
    print(f"{'method':<14}{'lr':>10}{'mean acc':>10}   per seed")
    for m in args.methods:
        per_seed = " ".join(f"{a:.4f}" for a in res.accuracy[m])
        print(f"{m:<14}{res.learning_rates[m]:>10g}{res.mean_accuracy(m):>10.4f}   {per_seed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"seeds": res.seeds, "accuracy": res.accuracy, "final_loss": res.final_loss,
                       "learning_rates": res.learning_rates}, fh, indent=2)


if __name__ == "__main__":
    main()
