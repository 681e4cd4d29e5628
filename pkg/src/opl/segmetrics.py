"""Segmentation reward: confusion counts, per-class IoU, mIoU, pixel accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .imgdata import IGNORE, LabelMap


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN over pixels whose ground truth is not IGNORE."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    evaluated_pixels: int

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def merged(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge counts with different class counts")
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.evaluated_pixels + other.evaluated_pixels,
        )


@dataclass
class MetricsReport:
    """IoU per present class, their mean, and pixel accuracy, all in [0,100]."""

    iou: dict[int, float]
    miou: float
    pixel_accuracy: float
    present_classes: tuple[int, ...]


def confusion(pred: LabelMap, gt: LabelMap) -> ConfusionCounts:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValidationError("prediction and ground truth shapes differ")
    if pred.num_classes != gt.num_classes:
        raise ValidationError("prediction and ground truth class counts differ")
    C = gt.num_classes
    valid = gt.data != IGNORE
    g = gt.data[valid].astype(np.int64)
    p = pred.data[valid].astype(np.int64)
    joint = np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    tp = np.diag(joint).copy()
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    return ConfusionCounts(tp, fp, fn, int(valid.sum()))


def metrics(counts: ConfusionCounts) -> MetricsReport:
    """Eqs. of record: IoU_c = 100*TP/(TP+FN+FP); mIoU averages present classes."""
    if counts.evaluated_pixels == 0:
        return MetricsReport({}, 100.0, 100.0, ())
    denom = counts.tp + counts.fn + counts.fp
    present = tuple(int(c) for c in np.flatnonzero(denom > 0))
    iou = {c: 100.0 * counts.tp[c] / denom[c] for c in present}
    miou = float(np.mean([iou[c] for c in present])) if present else 100.0
    acc = 100.0 * counts.tp.sum() / counts.evaluated_pixels
    return MetricsReport(iou, miou, float(acc), present)


def evaluate(pred: LabelMap, gt: LabelMap) -> MetricsReport:
    return metrics(confusion(pred, gt))


def misclassification_map(pred: LabelMap, gt: LabelMap) -> np.ndarray:
    """Boolean map, true where prediction differs from a non-IGNORE truth."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValidationError("prediction and ground truth shapes differ")
    return (pred.data != gt.data) & (gt.data != IGNORE)


def report_csv_header(num_classes: int) -> list[str]:
    return ["image_id", "miou", "pixel_acc"] + ["iou_%d" % c for c in range(num_classes)]


def report_csv_row(image_id: str, report: MetricsReport, num_classes: int) -> list[str]:
    """One CSV row; classes absent from the report serialize as empty fields."""
    row = [image_id, "%.6f" % report.miou, "%.6f" % report.pixel_accuracy]
    for c in range(num_classes):
        row.append("%.6f" % report.iou[c] if c in report.iou else "")
    return row
