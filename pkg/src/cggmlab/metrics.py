"""Per-modality utilization metrics and their iteration-to-iteration improvement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

ACCURACY = "accuracy"
MAE = "mae"
ORIENTATION = {ACCURACY: "higher-better", MAE: "lower-better"}


def metric_for_task(task: str) -> str:
    return ACCURACY if task == "classification" else MAE


def orient(kind: str, value: float) -> float:
    """Map a raw metric onto a higher-is-better scale (MAE is negated)."""
    if kind == ACCURACY:
        return float(value)
    if kind == MAE:
        return -float(value)
    raise ValueError(f"unknown metric kind {kind!r}")


def predicted_classes(logits) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest index.
    return np.argmax(np.asarray(logits), axis=-1)


def evaluate_batch(kind: str, predictions, targets) -> float:
    """Raw (unoriented) metric of one batch of predictions."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets)
    if p.shape[0] == 0:
        raise ShapeError("empty batch")
    if p.shape[0] != y.shape[0]:
        raise ShapeError(f"{p.shape[0]} predictions for {y.shape[0]} targets")
    if kind == ACCURACY:
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= p.shape[-1]:
            raise ShapeError(f"target out of range [0, {p.shape[-1]})")
        return float(np.mean(predicted_classes(p) == y))
    if kind == MAE:
        return float(np.mean(np.abs(p.reshape(-1) - y.reshape(-1).astype(np.float64))))
    raise ValueError(f"unknown metric kind {kind!r}")


@dataclass
class MetricState:
    """Previous/current oriented metric vectors for M modalities.

    ``beta > 0`` smooths the current vector with an exponential moving
    average seeded by the first observation.
    """

    kind: str
    modalities: int
    beta: float = 0.0
    previous: np.ndarray = field(default=None)
    current: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.previous is None:
            self.previous = np.zeros(self.modalities)
        if self.current is None:
            self.current = np.zeros(self.modalities)

    def update_and_delta(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        if raw.size != self.modalities:
            raise ShapeError(f"expected {self.modalities} metric values, got {raw.size}")
        oriented = np.array([orient(self.kind, v) for v in raw])
        if self.beta > 0 and self.t > 0:
            oriented = self.beta * self.current + (1.0 - self.beta) * oriented
        self.current = oriented
        delta = self.current - self.previous
        self.previous = self.current.copy()
        self.t += 1
        return delta


# Reporting-only metrics; never used as the modulation signal.
def f1_macro(predictions, targets, classes: int) -> float:
    pred = predicted_classes(predictions)
    y = np.asarray(targets, dtype=np.int64)
    scores = []
    for c in range(classes):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def pearson(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(p, y)[0, 1])


def report(task: str, predictions, targets, classes: int | None = None) -> dict[str, float]:
    """Held-out evaluation summary: accuracy/F1 or MAE/Pearson."""
    if task == "classification":
        return {
            "accuracy": evaluate_batch(ACCURACY, predictions, targets),
            "f1": f1_macro(predictions, targets, classes or np.asarray(predictions).shape[-1]),
        }
    return {"mae": evaluate_batch(MAE, predictions, targets), "corr": pearson(predictions, targets)}
