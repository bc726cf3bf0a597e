"""Run directories: everything a finished run leaves on disk, and reading it back."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from femam.diagnostics import Trace, estimate_constants
from femam.records import PRUNED, RoundMetrics, RunRecord

CONFIG = "config.json"
METRICS = "metrics.csv"
STRUCTURE = "structure.csv"
STRUCTURE_JSON = "structure.json"
DIAGNOSTICS = "diagnostics.json"
TRANSFERS = "transfers.csv"
PARAMS = "params.npz"
TRACE = "trace.npz"
FINAL = "final.json"


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def boundaries(row: np.ndarray) -> list[int]:
    """Positions p where clients p-1 and p use different models (pruned counts as its own id)."""
    return [p for p in range(1, len(row)) if row[p] != row[p - 1]]


def emit_structure(record: RunRecord, directory: str | Path) -> Path:
    """structure.csv (one row per level, blank for pruned) and structure.json with boundaries."""
    directory = Path(directory)
    matrix = np.asarray(record.structure, dtype=np.int64)
    with open(directory / STRUCTURE, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow(["" if v == PRUNED else int(v) for v in row])
    kinds = record.config.get("schedule") or ["global"] * len(matrix)
    levels = []
    for level, row in enumerate(matrix):
        levels.append(
            {
                "level": level,
                "kind": kinds[level] if level < len(kinds) else None,
                "boundaries": boundaries(row),
                "pruned": [int(i) for i in np.flatnonzero(row == PRUNED)],
                "models_used": sorted({int(v) for v in row if v != PRUNED}),
            }
        )
    _dump(directory / STRUCTURE_JSON, {"num_clients": int(matrix.shape[1]), "levels": levels})
    return directory / STRUCTURE


def read_structure(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            rows.append([PRUNED if v == "" else int(v) for v in row])
    return np.array(rows, dtype=np.int64)


def write_metrics(path: Path, rounds: list[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RoundMetrics.columns())
        for r in rounds:
            writer.writerow([repr(float(v)) if isinstance(v, float) else int(v) for v in r.row()])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            parsed[k] = float(v) if k not in ("round", "level", "level_round", "active", "down", "up", "bound_violated") else int(v)
        parsed["bound_violated"] = bool(parsed["bound_violated"])
        out.append(parsed)
    return out


def write_transfers(path: Path, record: RunRecord, dim: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "level", "active", "down", "up", "params_per_model", "params_sent"])
        for r in record.rounds:
            writer.writerow([r.round, r.level, r.active, r.down, r.up, dim, (r.down + r.up) * dim])


def f_monotone(metrics: list[dict], tol: float = 1e-9) -> bool:
    """F never rises by more than ``tol`` between consecutive rounds of the same cluster stage."""
    for a, b in zip(metrics, metrics[1:]):
        if a["level"] == b["level"] and b["F"] > a["F"] + tol:
            return False
    return True


def diagnostics(metrics: list[dict], trace: Trace | None, grad_bound: float) -> dict:
    """Estimated constants, per-round learning-rate bound and the rounds that exceeded it."""
    out = {
        "analytic_U": None if grad_bound is None or math.isnan(grad_bound) else grad_bound,
        "lr_bound_per_round": [None if math.isnan(m["lr_bound"]) else m["lr_bound"] for m in metrics],
        "violation_rounds": [m["round"] for m in metrics if m["bound_violated"]],
        "F_monotone": f_monotone(metrics),
    }
    if trace is not None:
        out["constants"] = estimate_constants(trace).as_dict()
    return out


def write_run(directory: str | Path, record: RunRecord, dim: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    U = None if record.grad_bound is None or math.isnan(record.grad_bound) else record.grad_bound
    cfg = {"algorithm": record.algorithm, "config": record.config, "grad_bound": U}
    cfg.update(extra or {})
    _dump(directory / CONFIG, cfg)
    write_metrics(directory / METRICS, record.rounds)
    if record.structure is not None:
        emit_structure(record, directory)
    write_transfers(directory / TRANSFERS, record, dim)
    arrays = dict(record.models)
    if record.client_models is not None:
        arrays["client_models"] = np.array(record.client_models)
    np.savez(directory / PARAMS, **arrays)
    if record.trace is not None:
        record.trace.save(directory / TRACE)
    metrics = read_metrics(directory / METRICS)
    _dump(directory / DIAGNOSTICS, diagnostics(metrics, record.trace, record.grad_bound))
    final = {
        "overall_accuracy": record.final.overall_accuracy,
        "mean_macro_f1": record.final.mean_macro_f1,
        "accuracy": record.final.accuracy,
        "macro_f1": record.final.macro_f1,
        "level_add_rounds": record.level_add_rounds,
        "monitors": record.monitors,
        "violations": record.violations,
    }
    _dump(directory / FINAL, final)
    return directory


def read_config(directory: str | Path) -> dict:
    return json.loads((Path(directory) / CONFIG).read_text())


def read_final(directory: str | Path) -> dict:
    return json.loads((Path(directory) / FINAL).read_text())


def rediagnose(directory: str | Path) -> dict:
    """Recompute diagnostics.json from metrics.csv and trace.npz of a run directory."""
    directory = Path(directory)
    metrics = read_metrics(directory / METRICS)
    trace_path = directory / TRACE
    trace = Trace.load(trace_path) if trace_path.exists() else None
    grad_bound = read_config(directory).get("grad_bound")
    result = diagnostics(metrics, trace, float("nan") if grad_bound is None else grad_bound)
    _dump(directory / DIAGNOSTICS, result)
    return result
