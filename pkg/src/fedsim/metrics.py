"""Classification metrics and the client/server weight divergence monitor.

All ratio metrics use the zero-division convention: a metric whose
denominator is zero is reported as 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distance import distance_matrix


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix has negative counts")

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_count: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValueError("label and prediction vectors differ in length")
        if y_true.size and (y_true.min() < 0 or y_true.max() >= class_count):
            raise ValueError(f"true labels outside [0, {class_count})")
        counts = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return float(np.trace(cm.counts)) / total if total else 0.0


def precision(cm: ConfusionMatrix) -> np.ndarray:
    return _safe_div(np.diag(cm.counts), cm.counts.sum(axis=0))


def recall(cm: ConfusionMatrix) -> np.ndarray:
    return _safe_div(np.diag(cm.counts), cm.counts.sum(axis=1))


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Harmonic mean of precision and recall for each class.

    Computed as 2TP / (2TP + FP + FN), which equals 2PR / (P + R) whenever
    P + R > 0 and needs a single rounding step. Classes with TP = 0 score 0.
    """
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    return _safe_div(2 * tp, 2 * tp + fp + fn)


def macro_f1(cm: ConfusionMatrix) -> float:
    # every class of the label schema counts, including zero-support ones
    return float(f1_per_class(cm).mean())


def micro_f1(cm: ConfusionMatrix) -> float:
    # single-label classification: micro F1 coincides with accuracy
    return accuracy(cm)


@dataclass
class DivergenceEntry:
    layer: int
    client_mean: np.ndarray  # (K,)
    client_max: np.ndarray  # (K,)


def divergence_snapshot(server_w, client_weights) -> list[DivergenceEntry]:
    """Mean and max neuron distance per client for every weighted layer."""
    out = []
    for layer, w in enumerate(server_w.weights):
        if w is None:
            continue
        dm = distance_matrix(layer, server_w, client_weights)
        if dm.entries.shape[1] == 0:
            zeros = np.zeros(dm.entries.shape[0])
            out.append(DivergenceEntry(layer, zeros, zeros.copy()))
            continue
        out.append(DivergenceEntry(layer, dm.entries.mean(axis=1), dm.entries.max(axis=1)))
    return out
