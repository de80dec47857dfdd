"""Segmentation metrics from a confusion matrix."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    confusion: np.ndarray  # (C, C); rows = truth, cols = prediction
    iou: np.ndarray  # per class; nan where the class is absent from truth and prediction
    miou: float
    overall_accuracy: float

    def to_text(self) -> str:
        lines = [f"mIoU {self.miou:.6f}", f"OA {self.overall_accuracy:.6f}"]
        for c, v in enumerate(self.iou):
            lines.append(f"class {c} IoU {'n/a' if np.isnan(v) else f'{v:.6f}'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "iou", "support"])
        support = self.confusion.sum(axis=1)
        for c, v in enumerate(self.iou):
            w.writerow([c, "" if np.isnan(v) else repr(float(v)), int(support[c])])
        w.writerow(["miou", repr(self.miou), int(support.sum())])
        w.writerow(["overall_accuracy", repr(self.overall_accuracy), int(support.sum())])
        return buf.getvalue()


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes - 1}]")
    return np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def evaluate(pred, truth, num_classes: int, ignore_label: int | None = None) -> EvalReport:
    """Per-class IoU = TP / (TP + FP + FN); mIoU over classes seen in truth or prediction.

    Points whose truth equals ``ignore_label`` are dropped before counting.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if ignore_label is not None:
        keep = truth != ignore_label
        pred, truth = pred[keep], truth[keep]
    cm = confusion_matrix(pred, truth, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.divide(tp, union, out=np.full(num_classes, np.nan), where=union > 0)
    seen = union > 0
    miou = float(iou[seen].mean()) if seen.any() else float("nan")
    oa = float(tp.sum() / cm.sum()) if cm.sum() else float("nan")
    return EvalReport(cm, iou, miou, oa)
