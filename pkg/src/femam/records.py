"""Per-round metrics and the result of one run."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from femam.diagnostics import Trace
from femam.metrics import EvalResult
from femam.protocol import PRUNED


@dataclass
class RoundMetrics:
    round: int
    level: int
    level_round: int
    accuracy: float
    macro_f1: float
    val_loss: float
    F: float
    R: float
    grad_norm_max: float
    lr_applied: float
    lr_bound: float
    bound_violated: bool
    active: int
    down: int
    up: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


@dataclass
class RunRecord:
    algorithm: str
    config: dict
    rounds: list[RoundMetrics] = field(default_factory=list)
    level_add_rounds: list[int] = field(default_factory=list)
    structure: np.ndarray | None = None
    final: EvalResult | None = None
    final_val_loss: np.ndarray | None = None
    level1_val_loss: np.ndarray | None = None
    models: dict[str, np.ndarray] = field(default_factory=dict)
    client_models: list[np.ndarray] | None = None
    history: list[np.ndarray] = field(default_factory=list)
    trace: Trace | None = None
    monitors: dict[str, bool] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    grad_bound: float = float("nan")

    @property
    def ok(self) -> bool:
        return all(self.monitors.values())

    def accuracy_curve(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.rounds])

    def flag(self, name: str, passed: bool, message: str = "") -> None:
        self.monitors[name] = self.monitors.get(name, True) and bool(passed)
        if not passed and message:
            self.violations.append(message)


__all__ = ["RoundMetrics", "RunRecord", "PRUNED"]
