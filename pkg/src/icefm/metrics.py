"""Confusion-matrix accumulation and support-weighted segmentation metrics.

All scores are computed from a single integer confusion matrix so that
per-class and aggregate numbers are exactly consistent with each other.
Aggregates are support-weighted means of the per-class scores; with weights
w_c = n_c / sum_j n_j the weighted recall collapses to overall pixel accuracy,
and that identity is preserved here to float precision because both are
evaluated from the same counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MetricsError

IGNORE_INDEX = 255

# Column order used by every metrics CSV this package emits.
METRIC_COLUMNS = ["f1", "acc", "prec", "rec", "iou"]


def _safe_div(num: float, den: float) -> float:
    """num / den with the 0/0 convention: undefined scores report as 0.0."""
    if den == 0:
        return 0.0
    return num / den


@dataclass
class ClassMetrics:
    """Scores for one class, plus its pixel support and aggregate weight."""

    class_id: int
    precision: float
    recall: float
    f1: float
    iou: float
    support: int
    weight: float


@dataclass
class MetricsReport:
    """Per-class scores and their support-weighted aggregates."""

    class_count: int
    total_pixels: int
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    weighted_iou: float
    per_class: list[ClassMetrics] = field(default_factory=list)

    def aggregate(self, name: str) -> float:
        return {
            "f1": self.weighted_f1,
            "acc": self.accuracy,
            "prec": self.weighted_precision,
            "rec": self.weighted_recall,
            "iou": self.weighted_iou,
        }[name]

    def csv_row(self, model: str, strategy: str, channels: str) -> dict:
        """One result row keyed for the benchmark report CSV."""
        row = {"model": model, "strategy": strategy, "channels": channels}
        for name in METRIC_COLUMNS:
            row[name] = self.aggregate(name)
        return row

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "total_pixels": self.total_pixels,
            "accuracy": self.accuracy,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "weighted_iou": self.weighted_iou,
            "per_class": [
                {
                    "class_id": c.class_id,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "iou": c.iou,
                    "support": c.support,
                    "weight": c.weight,
                }
                for c in self.per_class
            ],
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class ConfusionMatrix:
    """K x K integer counts, indexed counts[truth][pred].

    Accumulation is pure: ``accumulate``/``merge`` return a new matrix and
    leave the input untouched, so partial accumulations can be reused.
    """

    def __init__(self, class_count: int, counts: np.ndarray | None = None):
        if class_count < 1:
            raise MetricsError(f"class_count must be >= 1, got {class_count}")
        self.class_count = class_count
        if counts is None:
            counts = np.zeros((class_count, class_count), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (class_count, class_count):
                raise MetricsError(
                    f"counts shape {counts.shape} does not match class_count {class_count}"
                )
            if (counts < 0).any():
                raise MetricsError("confusion counts must be non-negative")
        self.counts = counts

    def accumulate(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        """Return a new matrix with one count added per non-ignored pixel.

        ``truth`` may contain the ignore label 255; those pixels contribute
        nothing. ``pred`` must be a valid class id everywhere -- a 255 in the
        prediction raster is an error, not an ignore.
        """
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise MetricsError(
                f"truth shape {truth.shape} != pred shape {pred.shape}"
            )
        k = self.class_count
        t = truth.astype(np.int64, copy=False).ravel()
        p = pred.astype(np.int64, copy=False).ravel()
        if p.size and ((p < 0).any() or (p >= k).any()):
            bad = int(p[(p < 0) | (p >= k)][0])
            raise MetricsError(
                f"prediction contains value {bad} outside [0, {k})"
            )
        keep = t != IGNORE_INDEX
        t = t[keep]
        p = p[keep]
        if t.size and ((t < 0).any() or (t >= k).any()):
            bad = int(t[(t < 0) | (t >= k)][0])
            raise MetricsError(
                f"truth contains value {bad} outside [0, {k}) and != {IGNORE_INDEX}"
            )
        add = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return ConfusionMatrix(k, self.counts + add)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Entrywise sum; both inputs are left unchanged."""
        if other.class_count != self.class_count:
            raise MetricsError(
                f"cannot merge class_count {other.class_count} into {self.class_count}"
            )
        return ConfusionMatrix(self.class_count, self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())

    def report(self) -> MetricsReport:
        """Per-class precision/recall/F1/IoU and support-weighted aggregates.

        A class with zero support gets weight 0 and recall/F1/IoU 0; any score
        with a zero denominator reports as 0 rather than NaN. An all-zero
        matrix has no defined metrics and raises.
        """
        k = self.class_count
        c = self.counts
        total = int(c.sum())
        if total == 0:
            raise MetricsError("cannot report metrics from an empty confusion matrix")

        per_class: list[ClassMetrics] = []
        correct = 0
        for i in range(k):
            tp = int(c[i, i])
            support = int(c[i, :].sum())
            predicted = int(c[:, i].sum())
            fp = predicted - tp
            fn = support - tp
            correct += tp
            per_class.append(
                ClassMetrics(
                    class_id=i,
                    precision=_safe_div(tp, tp + fp),
                    recall=_safe_div(tp, support),
                    f1=_safe_div(2 * tp, 2 * tp + fp + fn),
                    iou=_safe_div(tp, tp + fp + fn),
                    support=support,
                    weight=support / total,
                )
            )

        # Plain left-to-right sums in class order: keeps the aggregates
        # bit-reproducible and independent of BLAS reduction order.
        w_prec = 0.0
        w_rec = 0.0
        w_f1 = 0.0
        w_iou = 0.0
        for m in per_class:
            w_prec += m.weight * m.precision
            w_rec += m.weight * m.recall
            w_f1 += m.weight * m.f1
            w_iou += m.weight * m.iou

        return MetricsReport(
            class_count=k,
            total_pixels=total,
            accuracy=correct / total,
            weighted_precision=w_prec,
            weighted_recall=w_rec,
            weighted_f1=w_f1,
            weighted_iou=w_iou,
            per_class=per_class,
        )


def write_report_rows(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    """Write result rows as CSV with a fixed column order and float format.

    Floats are rendered with repr-stable %.10g so identical runs produce
    byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            out = []
            for col in columns:
                val = row.get(col, "")
                if isinstance(val, float):
                    out.append(format_float(val))
                else:
                    out.append(val)
            writer.writerow(out)


def format_float(val: float) -> str:
    return "%.10g" % val
