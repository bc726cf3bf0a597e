#!/usr/bin/env python3
"""Validation accuracy per round with the rounds where a level was added.

Writes a CSV and, unless --no-plot, an SVG next to it.

    python scripts/staircase.py multi-level --seed 0 --out staircase.csv
"""

import argparse
import csv
from pathlib import Path

from femam.experiments import SCENARIOS, run_algorithm


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario", choices=sorted(SCENARIOS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("staircase.csv"))
    ap.add_argument("--no-plot", action="store_true")
    args = ap.parse_args()

    sc = SCENARIOS[args.scenario]
    rec = run_algorithm(sc, "femam", args.seed)
    curve = rec.accuracy_curve()
    adds = set(rec.level_add_rounds)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy", "level_add"])
        for t, a in enumerate(curve):
            w.writerow([t, f"{a:.6f}", int(t in adds)])
    print(f"level adds at rounds {sorted(adds)}; final accuracy {rec.final.overall_accuracy:.2f}%")

    if not args.no_plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.plot(curve, lw=1)
        for t in sorted(adds)[1:]:
            ax.axvline(t, color="grey", ls=":", lw=0.8)
        ax.set_xlabel("round")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(f"{args.scenario}, seed {args.seed}")
        fig.tight_layout()
        fig.savefig(args.out.with_suffix(".svg"))
        print(f"wrote {args.out} and {args.out.with_suffix('.svg')}")


if __name__ == "__main__":
    main()
