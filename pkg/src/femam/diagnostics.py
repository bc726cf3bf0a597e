"""Learning-rate bounds from the convergence analysis and empirical estimates of their constants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from femam.model import loss_and_grad_offset


def lr_bound_theorem1(sq_distances: float | Sequence[float], local_steps: int, grad_bound: float, num_levels: int) -> float:
    """Step size below which the clustering objective cannot grow in a round.

    ``sq_distances`` is the client's squared distance to its centroid, summed
    over cluster levels (a per-level sequence is summed here).
    """
    total = float(np.sum(sq_distances))
    if local_steps <= 0 or grad_bound <= 0 or num_levels <= 0:
        raise ValueError("local_steps, grad_bound and num_levels must be positive")
    return math.sqrt(total / num_levels) / (local_steps * grad_bound)


def lr_bound_theorem2(
    grad_norm2: float, compactness: float, grad_bound: float, sigma2: float, beta: float, theorem1_bound: float
) -> float:
    """min(theorem-1 bound, (|g|^2 - B U^2) / (|g|^2 + sigma^2) * 2 / beta).

    Negative when |g|^2 < B U^2: the bound is vacuous for that step.
    """
    smooth = (grad_norm2 - compactness * grad_bound**2) / (grad_norm2 + sigma2) * (2.0 / beta)
    return min(theorem1_bound, smooth)


@dataclass
class DiagnosticConstants:
    U: float
    B: float
    beta: float
    sigma2: float

    def as_dict(self) -> dict:
        return asdict(self)


STEP_COLUMNS = ("round", "level", "client", "stoch_norm", "dev2", "secant")
GROUP_COLUMNS = ("round", "level", "client", "group", "n", "ratio")


@dataclass
class Trace:
    """Per-step and per-round gradient statistics logged during training.

    With ``keep_vectors`` the raw vectors behind every statistic are stored
    too, so the statistics can be recomputed from scratch.
    """

    keep_vectors: bool = False
    steps: list[tuple] = field(default_factory=list)
    groups: list[tuple] = field(default_factory=list)
    step_vectors: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    group_vectors: list[np.ndarray] = field(default_factory=list)

    def monitor(self, round_: int, level: int, client: int, batch, spec, offset) -> "StepMonitor":
        return StepMonitor(self, round_, level, client, batch, spec, offset)

    def log_groups(self, round_: int, level: int, row: np.ndarray, grads: dict[int, np.ndarray], n) -> None:
        """Record each client's full-batch gradient spread around its group's weighted mean."""
        counts = np.asarray(n, dtype=np.float64)
        for k in np.unique(row[row >= 0]):
            members = np.flatnonzero(row == k)
            w = counts[members] / counts[members].sum()
            mean = np.zeros_like(grads[int(members[0])])
            for i, wi in zip(members, w):
                mean = mean + wi * grads[int(i)]
            denom = np.linalg.norm(mean)
            for i in members:
                gap = np.linalg.norm(mean - grads[int(i)])
                ratio = gap / denom if denom > 0 else (0.0 if gap == 0 else math.inf)
                self.groups.append((round_, level, int(i), int(k), float(counts[i]), float(ratio)))
                if self.keep_vectors:
                    self.group_vectors.append(grads[int(i)].copy())

    def save(self, path: str | Path) -> None:
        arrays = {
            "steps": np.array(self.steps, dtype=np.float64).reshape(-1, len(STEP_COLUMNS)),
            "groups": np.array(self.groups, dtype=np.float64).reshape(-1, len(GROUP_COLUMNS)),
        }
        if self.keep_vectors and self.step_vectors:
            for j, name in enumerate(("step_theta", "step_stoch", "step_full")):
                arrays[name] = np.array([v[j] for v in self.step_vectors])
        if self.keep_vectors and self.group_vectors:
            arrays["group_grads"] = np.array(self.group_vectors)
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        with np.load(path) as data:
            steps, groups = data["steps"], data["groups"]
            if steps.ndim != 2 or steps.shape[1] != len(STEP_COLUMNS):
                raise ValueError("trace step table has the wrong shape")
            if groups.ndim != 2 or groups.shape[1] != len(GROUP_COLUMNS):
                raise ValueError("trace group table has the wrong shape")
            trace = cls(keep_vectors="step_theta" in data)
            trace.steps = [tuple(r) for r in steps]
            trace.groups = [tuple(r) for r in groups]
            if trace.keep_vectors:
                trace.step_vectors = list(zip(data["step_theta"], data["step_stoch"], data["step_full"]))
                if "group_grads" in data:
                    trace.group_vectors = list(data["group_grads"])
        return trace


class StepMonitor:
    """Called once per local step: stochastic-gradient norm, its deviation, local secant."""

    def __init__(self, trace: Trace, round_, level, client, batch, spec, offset):
        self.trace, self.key = trace, (round_, level, client)
        self.batch, self.spec, self.offset = batch, spec, offset
        self.prev: tuple[np.ndarray, np.ndarray] | None = None

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        return loss_and_grad_offset(self.batch.features, self.batch.labels, self.offset, theta, self.spec)[1]

    def step(self, theta: np.ndarray, stoch: np.ndarray) -> None:
        full = self.full_gradient(theta)
        dev2 = float(np.sum((stoch - full) ** 2))
        secant = math.nan
        if self.prev is not None:
            dx = np.linalg.norm(theta - self.prev[0])
            if dx > 0:
                secant = float(np.linalg.norm(full - self.prev[1]) / dx)
        self.prev = (theta.copy(), full)
        self.trace.steps.append((*self.key, float(np.linalg.norm(stoch)), dev2, secant))
        if self.trace.keep_vectors:
            self.trace.step_vectors.append((theta.copy(), stoch.copy(), full))


def _max(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(max(values)) if values else 0.0


def estimate_constants(trace: Trace) -> DiagnosticConstants:
    """Empirical stand-ins for the analysis constants, as maxima over the logged run.

    U: largest stochastic gradient norm.  B: largest relative gap between a
    client's gradient and its group's weighted mean.  sigma2: largest squared
    gap between a mini-batch gradient and the full-batch gradient at the same
    point.  beta: largest secant ratio between consecutive local iterates.
    """
    steps = np.array(trace.steps, dtype=np.float64).reshape(-1, len(STEP_COLUMNS))
    groups = np.array(trace.groups, dtype=np.float64).reshape(-1, len(GROUP_COLUMNS))
    return DiagnosticConstants(
        U=_max(steps[:, 3]),
        B=_max(groups[:, 5]),
        beta=_max(steps[:, 5]),
        sigma2=_max(steps[:, 4]),
    )
