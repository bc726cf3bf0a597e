#!/usr/bin/env python3
"""Final test accuracy of FeMAM and the baselines on one named scenario.

    python scripts/compare.py cluster-wise --seeds 0 1 2 3
"""

import argparse

import numpy as np

from femam.baselines import ALGORITHMS
from femam.experiments import SCENARIOS, run_algorithm


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario", choices=sorted(SCENARIOS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--algos", nargs="+", default=["femam", *ALGORITHMS])
    args = ap.parse_args()

    sc = SCENARIOS[args.scenario]
    acc = {a: [] for a in args.algos}
    for seed in args.seeds:
        shards, _ = sc.shards(seed)
        for algo in args.algos:
            rec = run_algorithm(sc, algo, seed, shards=shards)
            acc[algo].append(rec.final.overall_accuracy)
            print(f"seed {seed}  {algo:8s} {rec.final.overall_accuracy:6.2f}%", flush=True)

    print(f"\n{'algorithm':10s} {'mean':>7s} {'std':>6s}")
    for algo, vals in acc.items():
        print(f"{algo:10s} {np.mean(vals):7.2f} {np.std(vals):6.2f}")


if __name__ == "__main__":
    main()
