#!/usr/bin/env python3
"""Print the learned client-to-model structure next to the planted one.

    python scripts/structure.py two-level --seed 0
"""

import argparse

from femam.experiments import SCENARIOS, run_algorithm
from femam.metrics import adjusted_rand_index
from femam.protocol import PRUNED


def fmt(row) -> str:
    return " ".join("." if v == PRUNED else str(int(v)) for v in row)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario", choices=sorted(SCENARIOS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sc = SCENARIOS[args.scenario]
    shards, part = sc.shards(args.seed)
    rec = run_algorithm(sc, "femam", args.seed, shards=shards)

    print("planted:")
    for i, row in enumerate(part.ground_truth.levels):
        print(f"  tier {i}: {'-' if row is None else fmt(row)}")
    print("learned ('.' = pruned):")
    for level, row in enumerate(rec.structure):
        print(f"  level {level}: {fmt(row)}")

    truth = [r for r in part.ground_truth.levels if r is not None and len(set(r.tolist())) > 1]
    if truth and len(rec.structure) > 1:
        row = rec.structure[1]
        keep = row != PRUNED
        if keep.any():
            ari = adjusted_rand_index(row[keep], truth[0][keep])
            print(f"ARI of level 1 against the first clustered tier: {ari:.3f}")
    print(f"final accuracy {rec.final.overall_accuracy:.2f}%")


if __name__ == "__main__":
    main()
