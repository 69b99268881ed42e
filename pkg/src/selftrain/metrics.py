"""Confusion-matrix accumulation and IoU / mIoU reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maskops import IGNORE_INDEX


class NoEvaluatedClassesError(ValueError):
    pass


class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth ``g`` predicted as ``p``.

    Ground-truth pixels equal to the ignore value contribute nothing. Matrices
    from different workers or data shards can be summed with ``+``.
    """

    def __init__(self, num_classes: int, counts=None):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError("counts must be a non-negative C x C matrix")
        self.counts = counts

    def accumulate(self, pred, gt) -> ConfusionMatrix:
        """Add one prediction / ground-truth pair in place and return ``self``."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        if (pred == IGNORE_INDEX).any():
            raise ValueError("prediction contains the ignore value")
        n = self.num_classes
        valid = gt != IGNORE_INDEX
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= n or p.min() < 0 or p.max() >= n):
            raise ValueError(f"class ids must lie in [0, {n})")
        self.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and other.num_classes == self.num_classes
                and np.array_equal(other.counts, self.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


@dataclass(frozen=True)
class IoUReport:
    per_class: dict[int, float]
    miou: float
    pixel_count: int

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "miou": self.miou,
            "pixel_count": self.pixel_count,
        }


def iou_report(cm: ConfusionMatrix) -> IoUReport:
    """Per-class ``TP / (TP + FP + FN)`` and their mean.

    Classes absent from both ground truth and prediction (zero denominator)
    are left out of ``per_class`` and of the mean.
    """
    counts = cm.counts
    per_class = {}
    for c in range(cm.num_classes):
        tp = int(counts[c, c])
        denom = int(counts[c, :].sum()) + int(counts[:, c].sum()) - tp
        if denom > 0:
            per_class[c] = tp / denom
    if not per_class:
        raise NoEvaluatedClassesError("no evaluated classes")
    miou = sum(per_class.values()) / len(per_class)
    return IoUReport(per_class, miou, cm.total)
