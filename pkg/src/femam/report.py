"""Comparison tables and convergence curves from finished run directories."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from femam.runio import METRICS, read_config, read_final, read_metrics

SUMMARY_COLUMNS = (
    "algorithm", "runs", "accuracy_mean", "accuracy_std", "macro_f1_mean", "macro_f1_std",
    "best_accuracy_mean", "best_accuracy_std",
)


class MissingRunError(FileNotFoundError):
    pass


def run_name(directory: Path) -> str:
    return f"{directory.parent.name}_{directory.name}"


def _curve(directory: Path, out: Path, level_adds: list[int]) -> np.ndarray:
    metrics = read_metrics(directory / METRICS)
    adds = set(level_adds)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "level", "accuracy", "macro_f1", "F", "R", "level_add"])
        for m in metrics:
            writer.writerow(
                [m["round"], m["level"], repr(m["accuracy"]), repr(m["macro_f1"]), repr(m["F"]), repr(m["R"]),
                 int(m["round"] in adds)]
            )
    return np.array([m["accuracy"] for m in metrics])


def _plot(curve: np.ndarray, level_adds: list[int], title: str, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(curve)), curve, lw=1.2)
    for r in level_adds[1:]:
        ax.axvline(r, color="tab:blue", ls="--", lw=0.8, alpha=0.6)
    ax.set_xlabel("round")
    ax.set_ylabel("overall accuracy (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)


def build_report(run_dirs, out_dir, plots: bool = True) -> Path:
    """summary.csv (mean and population std over runs per algorithm), curves/, plots/."""
    run_dirs = [Path(d) for d in run_dirs]
    missing = [str(d) for d in run_dirs if not (d / METRICS).exists()]
    if missing:
        raise MissingRunError("missing run directories: " + ", ".join(missing))
    if not run_dirs:
        raise MissingRunError("no run directories given")
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    if plots:
        (out / "plots").mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[tuple[float, float, float]]] = defaultdict(list)
    for d in run_dirs:
        algo = read_config(d)["algorithm"]
        final = read_final(d)
        name = run_name(d)
        curve = _curve(d, out / "curves" / f"{name}.csv", final["level_add_rounds"])
        best = float(curve.max()) if len(curve) else final["overall_accuracy"]
        groups[algo].append((final["overall_accuracy"], final["mean_macro_f1"], best))
        if plots:
            _plot(curve, final["level_add_rounds"], name, out / "plots" / f"{name}.svg")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for algo in sorted(groups):
            v = np.array(groups[algo])
            mean, std = v.mean(axis=0), v.std(axis=0)
            writer.writerow([algo, len(v), mean[0], std[0], mean[1], std[1], mean[2], std[2]])
    return out


def read_summary(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {
            row["algorithm"]: {k: (v if k == "algorithm" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        }
