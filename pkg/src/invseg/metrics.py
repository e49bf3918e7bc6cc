"""Confusion-matrix accumulation and mIoU / mAcc."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray          # (C, C) int64, rows = truth, cols = predicted
    ignored: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any() or self.ignored < 0:
            raise ValueError("counts must be nonnegative")

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored


def accumulate(conf: ConfusionMatrix, predicted: np.ndarray, truth: np.ndarray,
               ignore_label: int = 255) -> ConfusionMatrix:
    """Add one image's pixel counts; truth pixels equal to ignore_label skip."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"prediction {predicted.shape} and truth {truth.shape} differ")
    keep = truth != ignore_label
    conf.ignored += int(predicted.size - keep.sum())
    t = truth[keep].astype(np.int64)
    p = predicted[keep].astype(np.int64)
    c = conf.num_classes
    if t.size:
        if t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c:
            raise ValueError(f"labels outside [0, {c})")
        np.add.at(conf.counts, (t, p), 1)
    return conf


def _tp_fp_fn(conf: ConfusionMatrix):
    tp = np.diag(conf.counts).astype(np.float64)
    fp = conf.counts.sum(axis=0) - tp
    fn = conf.counts.sum(axis=1) - tp
    return tp, fp, fn


def miou(conf: ConfusionMatrix) -> float:
    """Mean IoU over classes with nonzero union (absent classes excluded)."""
    tp, fp, fn = _tp_fp_fn(conf)
    union = tp + fp + fn
    valid = union > 0
    if not valid.any():
        raise UndefinedMetricError("no class has a nonzero union")
    return float(np.mean(tp[valid] / union[valid]))


def macc(conf: ConfusionMatrix) -> float:
    """Mean per-class accuracy over classes present in the truth."""
    tp, _, fn = _tp_fp_fn(conf)
    present = (tp + fn) > 0
    if not present.any():
        raise UndefinedMetricError("no class present in the ground truth")
    return float(np.mean(tp[present] / (tp[present] + fn[present])))
