"""Confusion-matrix segmentation metrics: pixel acc, class acc, mean IoU, f.w. IoU.

All four are percentages computed from one global confusion matrix (rows =
ground truth, columns = prediction). Classes that never occur in the ground
truth are left out of the class-accuracy and mIoU means and contribute 0 to
fwIoU.
"""

from __future__ import annotations

import json

import numpy as np

METRIC_NAMES = ("pixel_acc", "class_acc", "mean_iou", "fw_iou")


class ConfusionMatrix:
    def __init__(self, n_classes: int, ignore_id: int | None = None):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, label: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        label = np.asarray(label).reshape(-1).astype(np.int64)
        if pred.shape != label.shape:
            raise ValueError(f"prediction {pred.shape} and label {label.shape} differ")
        keep = np.ones(label.shape, dtype=bool) if self.ignore_id is None else label != self.ignore_id
        pred, label = pred[keep], label[keep]
        c = self.n_classes
        for name, ids in (("label", label), ("prediction", pred)):
            if ids.size and (ids.min() < 0 or ids.max() >= c):
                bad = ids[(ids < 0) | (ids >= c)][0]
                raise ValueError(f"{name} id {bad} outside [0, {c})")
        self.counts += np.bincount(c * label + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        out = ConfusionMatrix(self.n_classes, self.ignore_id)
        out.counts = self.counts + other.counts
        return out

    def _check(self):
        if self.total == 0:
            raise ValueError("empty confusion matrix")

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from the ground truth."""
        cm = self.counts.astype(np.float64)
        diag = np.diag(cm)
        rows, cols = cm.sum(axis=1), cm.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = diag / (rows + cols - diag)
        iou[rows == 0] = np.nan
        return iou


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    cm._check()
    return 100.0 * float(np.trace(cm.counts)) / cm.total


def class_accuracy(cm: ConfusionMatrix) -> float:
    cm._check()
    rows = cm.counts.sum(axis=1)
    present = rows > 0
    return 100.0 * float(np.mean(np.diag(cm.counts)[present] / rows[present]))


def mean_iou(cm: ConfusionMatrix) -> float:
    cm._check()
    return 100.0 * float(np.nanmean(cm.per_class_iou()))


def fw_iou(cm: ConfusionMatrix) -> float:
    cm._check()
    # weight by integer row counts and divide once so a perfect matrix gives exactly 100
    rows = cm.counts.sum(axis=1)
    iou = np.nan_to_num(cm.per_class_iou(), nan=0.0)
    return 100.0 * float(np.sum(rows * iou)) / cm.total


def compute_all(cm: ConfusionMatrix) -> dict[str, float]:
    return {
        "pixel_acc": pixel_accuracy(cm),
        "class_acc": class_accuracy(cm),
        "mean_iou": mean_iou(cm),
        "fw_iou": fw_iou(cm),
    }


def format_report(metrics: dict[str, float]) -> str:
    """Flat ``name: value`` lines, two decimals."""
    return "".join(f"{k}: {metrics[k]:.2f}\n" for k in METRIC_NAMES)


def format_record(metrics: dict[str, float]) -> str:
    """Single-line JSON record, values rounded to two decimals."""
    return json.dumps({k: round(metrics[k], 2) for k in METRIC_NAMES}, separators=(",", ":"))


def parse_record(line: str) -> dict[str, float]:
    data = json.loads(line)
    missing = [k for k in METRIC_NAMES if k not in data]
    if missing:
        raise ValueError(f"metric record lacks {', '.join(missing)}")
    return {k: float(data[k]) for k in METRIC_NAMES}


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            out[key.strip()] = float(value)
    return out
