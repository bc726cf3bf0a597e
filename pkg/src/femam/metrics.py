"""Accuracy, macro-F1, client-level evaluation and the adjusted Rand index."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import comb


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.mean(predictions == labels))


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean F1 over classes seen in the labels or the predictions."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    tp = np.bincount(labels[predictions == labels], minlength=num_classes).astype(float)
    predicted = np.bincount(predictions, minlength=num_classes).astype(float)
    actual = np.bincount(labels, minlength=num_classes).astype(float)
    seen = (predicted + actual) > 0
    if not seen.any():
        raise ValueError("macro-F1 of an empty set")
    f1 = 2 * tp[seen] / (predicted[seen] + actual[seen])
    return float(f1.mean())


@dataclass
class EvalResult:
    accuracy: np.ndarray
    macro_f1: np.ndarray
    overall_accuracy: float
    mean_macro_f1: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy.tolist(),
            "macro_f1": self.macro_f1.tolist(),
            "overall_accuracy": self.overall_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
        }


def evaluate(logits: Sequence[np.ndarray], labels: Sequence[np.ndarray], weights: Sequence[float], num_classes: int) -> EvalResult:
    """Per-client scores; overall accuracy is weighted by ``weights`` (train sizes)."""
    acc = np.array([accuracy(np.argmax(z, axis=1), y) for z, y in zip(logits, labels)])
    f1 = np.array([macro_f1(np.argmax(z, axis=1), y, num_classes) for z, y in zip(logits, labels)])
    w = np.asarray(weights, dtype=np.float64)
    return EvalResult(acc, f1, float(np.dot(w, acc) / w.sum()), float(f1.mean()))


def adjusted_rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if len(a) != len(b):
        raise ValueError("labelings differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    pairs = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    total = comb(len(a), 2)
    expected = rows * cols / total if total else 0.0
    best = (rows + cols) / 2
    if best == expected:
        return 1.0
    return float((pairs - expected) / (best - expected))
