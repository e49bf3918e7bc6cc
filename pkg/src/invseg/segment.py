"""From optimized class maps to a label grid at the requested size."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .maps import bilinear_resize
from .refine import ClassMaps


@dataclass
class SegmentationResult:
    labels: np.ndarray          # (out_h, out_w) int class indices
    maps: ClassMaps             # final per-class score maps (working grid)
    trace: tuple = ()           # per-step loss values from the inversion run
    config: Optional[dict] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        c = self.maps.num_classes
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError(f"labels out of range [0, {c})")


def _resize_stack(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    hwc = np.transpose(stack, (1, 2, 0))
    return np.transpose(ag.value_of(bilinear_resize(hwc, out_h, out_w)), (2, 0, 1))


def _nearest_resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape
    rows = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
    cols = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
    return labels[np.ix_(rows, cols)]


def predict_mask(class_maps: ClassMaps, out_h: int, out_w: int,
                 argmax_first: bool = False, trace=(), config=None) -> SegmentationResult:
    """Per-pixel argmax of the class maps at (out_h, out_w).

    Default order resizes the soft maps bilinearly and then takes the argmax,
    which keeps boundaries smooth; ``argmax_first=True`` labels at the working
    grid and nearest-resizes the labels instead. np.argmax already breaks ties
    toward the lowest class index.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dims must be positive, got {out_h}x{out_w}")
    stack = ag.value_of(class_maps.maps)
    if argmax_first:
        labels = _nearest_resize_labels(np.argmax(stack, axis=0), out_h, out_w)
    else:
        labels = np.argmax(_resize_stack(stack, out_h, out_w), axis=0)
    return SegmentationResult(labels=labels, maps=class_maps,
                              trace=tuple(trace), config=config)
