"""Accuracy, confusion matrix and per-class / macro precision and recall.

Confusion matrices are indexed ``counts[true, predicted]``.  Any ratio with a
zero denominator is reported as 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # C x C int64, rows = true class

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self, counts_path, normalized_path=None) -> None:
        header = "true\\pred," + ",".join(str(c) for c in range(self.classes))
        _write_matrix(counts_path, header, self.counts, lambda v: str(int(v)))
        if normalized_path is not None:
            _write_matrix(normalized_path, header, self.normalized(), repr)


def _write_matrix(path, header, matrix, fmt):
    lines = [header]
    for i, row in enumerate(matrix):
        lines.append(",".join([str(i)] + [fmt(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def _labels(values, classes=None) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("labels must be integers")
    arr = arr.astype(np.int64)
    if classes is not None and arr.size and (arr.min() < 0 or arr.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    return arr


def confusion(pred, truth, classes: int) -> ConfusionMatrix:
    pred = _labels(pred, classes)
    truth = _labels(truth, classes)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions for {truth.size} labels")
    counts = np.bincount(truth * classes + pred, minlength=classes * classes)
    return ConfusionMatrix(counts.reshape(classes, classes).astype(np.int64))


@dataclass(frozen=True)
class PrecisionRecall:
    precision: np.ndarray
    recall: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())


def precision_recall(cm: ConfusionMatrix) -> PrecisionRecall:
    diag = np.diag(cm.counts).astype(np.float64)
    predicted = cm.counts.sum(axis=0).astype(np.float64)
    actual = cm.counts.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, predicted, out=np.zeros_like(diag), where=predicted > 0)
    recall = np.divide(diag, actual, out=np.zeros_like(diag), where=actual > 0)
    return PrecisionRecall(precision, recall)


def accuracy(pred, truth) -> float:
    pred = _labels(pred)
    truth = _labels(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions for {truth.size} labels")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(pred == truth))


@dataclass(frozen=True)
class Report:
    accuracy: float
    macro_precision: float
    macro_recall: float
    confusion: ConfusionMatrix

    def lines(self) -> list[str]:
        return [f"accuracy {self.accuracy!r}",
                f"macro_precision {self.macro_precision!r}",
                f"macro_recall {self.macro_recall!r}"]


def report(pred, truth, classes: int) -> Report:
    cm = confusion(pred, truth, classes)
    pr = precision_recall(cm)
    return Report(accuracy(pred, truth), pr.macro_precision, pr.macro_recall, cm)
