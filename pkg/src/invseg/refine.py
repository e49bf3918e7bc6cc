"""Refined per-class cross-attention maps.

Cross-attention columns are completed by multiplication with the aggregated
self-attention, then min-max normalized per token; token maps are reduced to
class maps via the class spans.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .maps import minmax_norm_cols


@dataclass(frozen=True)
class ClassMaps:
    """Per-class score maps on the working grid.

    ``maps`` is (C, H, W), each map min-max normalized into [0, 1]; may hold an
    autograd Tensor when produced inside a gradient chain.
    """

    maps: object  # (C, H, W) ndarray or Tensor
    class_names: tuple

    def __post_init__(self):
        v = ag.value_of(self.maps)
        if v.ndim != 3:
            raise ValueError(f"class maps must be (C, H, W), got shape {v.shape}")
        if v.shape[0] != len(self.class_names):
            raise ValueError("one name per class map required")
        if v.shape[0] < 2:
            raise ValueError("need at least two classes (foreground + background)")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def side(self) -> int:
        return ag.value_of(self.maps).shape[1]

    def values(self) -> np.ndarray:
        return ag.value_of(self.maps)


def refine_cross(a_self, a_cross):
    """norm(A_self @ A_cross) with per-column min-max normalization."""
    sv, cv = ag.value_of(a_self), ag.value_of(a_cross)
    if sv.ndim != 2 or cv.ndim != 2 or sv.shape[1] != cv.shape[0]:
        raise ValueError(f"inner dims disagree: {sv.shape} @ {cv.shape}")
    return minmax_norm_cols(ag.matmul(a_self, a_cross))


def class_maps(refined, class_spans, background_class: Optional[int],
               class_names=None) -> ClassMaps:
    """Reduce refined token maps (HW, K) to per-class maps.

    A class's map is the mean of its token maps, re-normalized. A background
    class without a token span is synthesized as norm(1 - max over foreground).
    """
    v = ag.value_of(refined)
    hw = v.shape[0]
    side = int(round(np.sqrt(hw)))
    if side * side != hw:
        raise ValueError(f"refined maps must live on a square grid, got {hw} pixels")
    if class_names is None:
        class_names = tuple(f"class{c}" for c in range(len(class_spans)))

    per_class = [None] * len(class_spans)
    foreground = []
    for c, span in enumerate(class_spans):
        if span is None:
            if c != background_class:
                raise ValueError(f"class {c} has no span and is not the background class")
            continue
        a, b = span
        if b <= a:
            raise ValueError(f"class {c} has empty token span {span}")
        cols = refined[:, a:b]
        m = ag.amean(cols, axis=1) if b - a > 1 else ag.reshape(cols, (hw,))
        m = _renorm(m)
        per_class[c] = m
        foreground.append(m)

    if background_class is not None and per_class[background_class] is None:
        fg = ag.stack(foreground, axis=0)
        bg = _renorm(ag.sub(1.0, ag.amax(fg, axis=0)))
        per_class[background_class] = bg

    stacked = ag.stack(per_class, axis=0)
    grids = ag.reshape(stacked, (len(per_class), side, side))
    return ClassMaps(maps=grids, class_names=tuple(class_names))


def _renorm(m):
    from .maps import minmax_norm
    return minmax_norm(m)
