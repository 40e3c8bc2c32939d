#!/usr/bin/env python3
"""Supervised latent recovery: SC3 training on the scalar-set dataset, then
adaptation of the unseen test tasks and their latent recovery error."""

import argparse
import json
import statistics

from disentango.experiments import (SUPERVISED_STEPS, supervised_dataset,
                                    supervised_recovery)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=SUPERVISED_STEPS)
    ap.add_argument("--out", default="supervised_results.json")
    args = ap.parse_args()

    tasks, manifest = supervised_dataset()
    errors = {}
    for seed in args.seeds:
        err = supervised_recovery(tasks, manifest, seed, args.steps)
        errors[str(seed)] = err
        print(f"seed={seed}: latent error={err:.2f}%", flush=True)
    out = {"per_seed": errors,
           "median_pct": statistics.median(errors.values())}
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    print(json.dumps(out["median_pct"], indent=2))


if __name__ == "__main__":
    main()
