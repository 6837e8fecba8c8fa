"""Pixel F-measure over pooled (micro-aggregated) confusion counts.

Counts from every image are summed per class first and F is computed once
per class group, so large parts weigh more than small ones.  Background is
never scored.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError

# row name -> palette classes pooled into that row
REPORT_ROWS = {
    "eye": (2, 4),
    "eyebrow": (1, 3),
    "nose": (5,),
    "in-mouth": (7,),
    "upper lip": (6,),
    "lower lip": (8,),
    "mouth-all": (6, 7, 8),
    "overall": (1, 2, 3, 4, 5, 6, 7, 8),
}


class ConfusionCounts:
    """Per-class TP/FP/FN pixel counts; class 0 (background) is tracked but never scored."""

    def __init__(self, num_classes: int = 9):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)

    def add_arrays(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred = np.asarray(pred).ravel()
        truth = np.asarray(truth).ravel()
        n = self.num_classes
        hit = pred == truth
        tp = np.bincount(pred[hit], minlength=n)
        pred_total = np.bincount(pred, minlength=n)
        truth_total = np.bincount(truth, minlength=n)
        self.tp += tp
        self.fp += pred_total - tp
        self.fn += truth_total - tp

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge counts over different palettes")
        out = ConfusionCounts(self.num_classes)
        for name in ("tp", "fp", "fn"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def copy(self) -> "ConfusionCounts":
        return self.merge(ConfusionCounts(self.num_classes))

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionCounts)
            and self.num_classes == other.num_classes
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("tp", "fp", "fn"))
        )


def accumulate(counts: ConfusionCounts, predicted: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise DataError(f"prediction {predicted.shape} and truth {truth.shape} differ in size")
    for name, arr in (("prediction", predicted), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= counts.num_classes):
            raise DataError(f"{name} uses labels outside 0..{counts.num_classes - 1}")
    out = counts.copy()
    out.add_arrays(predicted.astype(np.int64), truth.astype(np.int64))
    return out


def f_measure(counts: ConfusionCounts, class_set: Iterable[int]) -> float:
    classes = list(class_set)
    if not classes:
        raise ConfigError("f_measure needs at least one class")
    tp = int(counts.tp[classes].sum())
    fp = int(counts.fp[classes].sum())
    fn = int(counts.fn[classes].sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ReportRow:
    name: str
    tp: int
    fp: int
    fn: int
    f: float


def report(counts: ConfusionCounts) -> list[ReportRow]:
    rows = []
    for name, classes in REPORT_ROWS.items():
        idx = list(classes)
        rows.append(
            ReportRow(name, int(counts.tp[idx].sum()), int(counts.fp[idx].sum()),
                      int(counts.fn[idx].sum()), f_measure(counts, classes))
        )
    return rows


def format_report(rows: list[ReportRow]) -> str:
    """Aligned text table; F values are micro-averaged over pooled pixels."""
    out = io.StringIO()
    out.write(f"{'class':<10} {'TP':>9} {'FP':>9} {'FN':>9} {'F (micro)':>10}\n")
    for r in rows:
        out.write(f"{r.name:<10} {r.tp:>9d} {r.fp:>9d} {r.fn:>9d} {r.f:>10.4f}\n")
    return out.getvalue()


def report_tsv(rows: list[ReportRow]) -> str:
    lines = ["class\tTP\tFP\tFN\tF"]
    lines += [f"{r.name}\t{r.tp}\t{r.fp}\t{r.fn}\t{r.f:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
