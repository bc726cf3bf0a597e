"""Flat-parameter predictors, additive prediction, cross-entropy and its gradient.

A model is a 1-D float64 array.  Its layout is fixed by a PredictorSpec:

    linear-softmax:    W (input_dim x num_classes), b (num_classes)
    one-hidden-layer:  W1 (input_dim x hidden_dim), b1 (hidden_dim),
                       W2 (hidden_dim x num_classes), b2 (num_classes)

with every matrix stored row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LINEAR = "linear-softmax"
HIDDEN = "one-hidden-layer"
PREDICTOR_KINDS = (LINEAR, HIDDEN)
KINDS = (LINEAR, HIDDEN)


class DimensionMismatchError(ValueError):
    def __init__(self, level: int, got: int, expected: int):
        super().__init__(f"model at level {level} has dim {got}, expected {expected}")
        self.level = level


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if self.kind == LINEAR and self.hidden_dim != 0:
            raise ValueError("linear-softmax takes hidden_dim=0")
        if self.kind == HIDDEN and self.hidden_dim < 1:
            raise ValueError("one-hidden-layer needs hidden_dim >= 1")

    @property
    def dim(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == LINEAR:
            return d * c + c
        return d * h + h + h * c + c

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, ...]:
        """Views of the weight blocks inside a flat vector."""
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == LINEAR:
            return theta[: d * c].reshape(d, c), theta[d * c :]
        i = 0
        w1 = theta[i : i + d * h].reshape(d, h); i += d * h
        b1 = theta[i : i + h]; i += h
        w2 = theta[i : i + h * c].reshape(h, c); i += h * c
        b2 = theta[i : i + c]
        return w1, b1, w2, b2


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("features must be (samples, dim) and labels (samples,)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])


def init_params(spec: PredictorSpec, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Uniform in [-a, a] per layer, a = scale / sqrt(fan_in)."""
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    if spec.kind == LINEAR:
        a = scale / np.sqrt(d)
        return rng.uniform(-a, a, size=spec.dim)
    a1 = scale / np.sqrt(d)
    a2 = scale / np.sqrt(h)
    first = rng.uniform(-a1, a1, size=d * h + h)
    second = rng.uniform(-a2, a2, size=h * c + c)
    return np.concatenate([first, second])


def forward(x: np.ndarray, theta: np.ndarray, spec: PredictorSpec) -> np.ndarray:
    if spec.kind == LINEAR:
        w, b = spec.unpack(theta)
        return x @ w + b
    w1, b1, w2, b2 = spec.unpack(theta)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def _check_dims(models: Sequence[np.ndarray], spec: PredictorSpec) -> None:
    for level, theta in enumerate(models):
        if np.ndim(theta) != 1 or len(theta) != spec.dim:
            raise DimensionMismatchError(level, int(np.size(theta)), spec.dim)


def predict_additive(batch: Batch | np.ndarray, models: Sequence[np.ndarray], spec: PredictorSpec) -> np.ndarray:
    """Sum of every model's logits; all-zero logits for an empty model list."""
    x = batch.features if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    _check_dims(models, spec)
    logits = np.zeros((len(x), spec.num_classes))
    for theta in models:
        logits = logits + forward(x, theta, spec)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise EmptyBatchError("cross-entropy of an empty batch")
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def loss_and_grad_offset(
    x: np.ndarray, y: np.ndarray, offset: np.ndarray | None, theta: np.ndarray, spec: PredictorSpec
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``offset + f(x; theta)`` and its gradient in theta.

    ``offset`` holds the logits of frozen levels; it enters the forward pass
    only.  This is the kernel every local update runs on.
    """
    n = len(y)
    if n == 0:
        raise EmptyBatchError("cannot take a gradient on an empty batch")
    rows = np.arange(n)
    if spec.kind == LINEAR:
        w, b = spec.unpack(theta)
        logits = x @ w + b
    else:
        w1, b1, w2, b2 = spec.unpack(theta)
        hidden = np.tanh(x @ w1 + b1)
        logits = hidden @ w2 + b2
    if offset is not None:
        logits = logits + offset
    logp = log_softmax(logits)
    loss = float(-logp[rows, y].mean())
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= n
    if spec.kind == LINEAR:
        return loss, np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])
    back = (delta @ w2.T) * (1.0 - hidden**2)
    grad = np.concatenate(
        [(x.T @ back).ravel(), back.sum(axis=0), (hidden.T @ delta).ravel(), delta.sum(axis=0)]
    )
    return loss, grad


def loss_and_grad(
    batch: Batch, models: Sequence[np.ndarray], spec: PredictorSpec, trainable_level: int
) -> tuple[float, np.ndarray]:
    """Loss of the additive prediction and its gradient w.r.t. one level.

    Every other level contributes to the forward pass as a constant offset.
    """
    if not 0 <= trainable_level < len(models):
        raise IndexError(f"trainable_level {trainable_level} outside 0..{len(models) - 1}")
    if len(batch) == 0:
        raise EmptyBatchError("cannot take a gradient on an empty batch")
    _check_dims(models, spec)
    frozen = [m for level, m in enumerate(models) if level != trainable_level]
    offset = predict_additive(batch, frozen, spec) if frozen else None
    return loss_and_grad_offset(batch.features, batch.labels, offset, models[trainable_level], spec)


def linear_grad_norm_bound(features: np.ndarray) -> float:
    """Upper bound on the mean cross-entropy gradient norm of a linear-softmax model.

    Per sample the gradient is (x, 1) outer (p - e_y), and ||p - e_y|| <= sqrt(2).
    """
    sq = (np.asarray(features) ** 2).sum(axis=1)
    return float(np.sqrt(2.0) * np.sqrt(sq.max() + 1.0))
