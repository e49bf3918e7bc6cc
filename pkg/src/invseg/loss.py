"""Contrastive soft clustering loss, augmented-view entropy, total objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .distance import (EPS_DEGENERATE, DistanceMatrix, anchor_to_map_distance,
                       soft_anchors)
from .maps import bilinear_resize
from .refine import ClassMaps

DEFAULT_VIEWS = 2
DEFAULT_MIN_CROP = 0.6
DEFAULT_ALPHA = 1.0
DEFAULT_ANCHOR_SCALE = 4.0
DEFAULT_ANCHOR_CENTER = 0.5


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    height: int
    width: int

    def as_tuple(self):
        return (self.top, self.left, self.height, self.width)


@dataclass(frozen=True)
class AugmentSpec:
    """Crop windows for each augmented view of one source grid."""

    source_h: int
    source_w: int
    windows: tuple  # one CropWindow per view
    seed: int = 0
    min_crop: float = DEFAULT_MIN_CROP

    def __post_init__(self):
        for win in self.windows:
            if win.height < 1 or win.width < 1:
                raise ValueError(f"empty crop window {win}")
            if win.top < 0 or win.left < 0 \
                    or win.top + win.height > self.source_h \
                    or win.left + win.width > self.source_w:
                raise ValueError(f"window {win} outside {self.source_h}x{self.source_w} grid")
            if win.height < self.min_crop * self.source_h - 1 \
                    or win.width < self.min_crop * self.source_w - 1:
                raise ValueError(f"window {win} below minimum crop rate {self.min_crop}")

    @property
    def views(self) -> int:
        return len(self.windows)


def full_frame_spec(side: int, views: int = 1) -> AugmentSpec:
    win = CropWindow(0, 0, side, side)
    return AugmentSpec(side, side, tuple(win for _ in range(views)), min_crop=0.0)


def random_augment_spec(side: int, views: int, min_crop: float, rng) -> AugmentSpec:
    """Square random-resized-crop windows with side ratio >= min_crop."""
    windows = []
    for _ in range(views):
        ratio = rng.uniform(min_crop, 1.0)
        size = max(1, int(round(ratio * side)))
        size = min(size, side)
        top = int(rng.integers(0, side - size + 1))
        left = int(rng.integers(0, side - size + 1))
        windows.append(CropWindow(top, left, size, size))
    return AugmentSpec(side, side, tuple(windows), min_crop=min_crop)


@dataclass(frozen=True)
class LossBreakdown:
    cluster: float
    entropy: float
    total: float
    alpha: float
    degenerate_flags: tuple  # per-class booleans

    def __post_init__(self):
        if np.isfinite(self.total) and abs(self.total - (self.cluster + self.alpha * self.entropy)) > 1e-9:
            raise ValueError("total must equal cluster + alpha * entropy")


def _map_stack(class_maps):
    if isinstance(class_maps, ClassMaps):
        return class_maps.maps
    return class_maps


def class_degenerate_flags(class_maps, scale: float, center: float, mask=None) -> tuple:
    """True where a class map (or its anchor mass) is numerically all-zero."""
    v = ag.value_of(_map_stack(class_maps))
    m_flat = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    flags = []
    for c in range(v.shape[0]):
        m = v[c].reshape(-1)
        anchor_mass = ag.value_of(soft_anchors(m, scale, center))
        if m_flat is not None:
            m = m * m_flat
            anchor_mass = anchor_mass * m_flat
        flags.append(bool(m.sum() <= EPS_DEGENERATE or anchor_mass.sum() <= EPS_DEGENERATE))
    return tuple(flags)


def _flat_mask(mask, size: int):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.size != size:
        raise ValueError(f"pixel mask has {m.size} entries, maps have {size}")
    return m


def _masked(node, mask):
    if mask is None:
        return node
    v = ag.value_of(node)
    return ag.mul(ag.reshape(node, (v.size,)), mask)


def d_intra(dist: DistanceMatrix, class_maps, scale: float,
            center: float = DEFAULT_ANCHOR_CENTER, mask=None):
    """Sum over classes of the anchor-weighted distance within the class map.

    ``mask`` (optional, per pixel) zeroes both the anchor weights and the map
    weights of excluded pixels so they drop out of every weighted mean.
    """
    stack = _map_stack(class_maps)
    c = ag.value_of(stack).shape[0]
    mask = _flat_mask(mask, ag.value_of(stack)[0].size)
    total = 0.0
    for i in range(c):
        m = _masked(stack[i], mask)
        anchor = _masked(soft_anchors(stack[i], scale, center), mask)
        total = ag.add(total, anchor_to_map_distance(dist, anchor, m))
    return total


def d_inter(dist: DistanceMatrix, class_maps, scale: float,
            center: float = DEFAULT_ANCHOR_CENTER, symmetric: bool = False,
            mask=None):
    """Sum over class pairs lo < hi of D(anchor_hi, map_lo).

    The pairing is asymmetric on purpose (anchors from the higher-indexed
    class, map from the lower); ``symmetric=True`` averages both directions.
    """
    stack = _map_stack(class_maps)
    c = ag.value_of(stack).shape[0]
    if c < 2:
        return 0.0
    mask = _flat_mask(mask, ag.value_of(stack)[0].size)
    anchors = [_masked(soft_anchors(stack[i], scale, center), mask) for i in range(c)]
    maps = [_masked(stack[i], mask) for i in range(c)]
    total = 0.0
    for lo in range(c - 1):
        for hi in range(lo + 1, c):
            term = anchor_to_map_distance(dist, anchors[hi], maps[lo])
            if symmetric:
                rev = anchor_to_map_distance(dist, anchors[lo], maps[hi])
                term = ag.mul(ag.add(term, rev), 0.5)
            total = ag.add(total, term)
    return total


def cluster_loss(dist: DistanceMatrix, class_maps, scale: float,
                 center: float = DEFAULT_ANCHOR_CENTER, symmetric: bool = False,
                 mask=None):
    """D_intra / C - 2 D_inter / (C (C-1))."""
    c = ag.value_of(_map_stack(class_maps)).shape[0]
    if c < 2:
        raise ValueError(f"cluster loss needs at least 2 classes, got {c}")
    intra = d_intra(dist, class_maps, scale, center, mask=mask)
    inter = d_inter(dist, class_maps, scale, center, symmetric=symmetric, mask=mask)
    return ag.sub(ag.div(intra, float(c)), ag.div(ag.mul(inter, 2.0), float(c * (c - 1))))


# ---------------------------------------------------------------------------
# augmentation


def apply_augment(map_stack, spec: AugmentSpec, view: int):
    """Crop one view's window and resize back to the source grid.

    ``map_stack`` is (C, H, W); the output has the same shape.
    """
    win = spec.windows[view]
    v = ag.value_of(map_stack)
    c, h, w = v.shape
    if h != spec.source_h or w != spec.source_w:
        raise ValueError(f"stack grid {h}x{w} does not match spec {spec.source_h}x{spec.source_w}")
    cropped = map_stack[:, win.top:win.top + win.height, win.left:win.left + win.width]
    hwc = ag.transpose(cropped, (1, 2, 0))
    resized = bilinear_resize(hwc, h, w)
    return ag.transpose(resized, (2, 0, 1))


def invert_augment(view_maps, spec: AugmentSpec, view: int):
    """Map a view's grid back into source coordinates.

    Returns (stack, coverage): the view resized to its window and pasted into
    zeros, plus a {0,1} mask of the pixels the window covers.
    """
    win = spec.windows[view]
    v = ag.value_of(view_maps)
    c = v.shape[0]
    hwc = ag.transpose(view_maps, (1, 2, 0))
    shrunk = bilinear_resize(hwc, win.height, win.width)
    full = ag.embed(shrunk, (spec.source_h, spec.source_w, c), win.top, win.left)
    out = ag.transpose(full, (2, 0, 1))
    coverage = np.zeros((spec.source_h, spec.source_w))
    coverage[win.top:win.top + win.height, win.left:win.left + win.width] = 1.0
    return out, coverage


def fuse_views(view_maps: Sequence, spec: AugmentSpec):
    """Coverage-weighted per-pixel mean of reverse-aligned views.

    Returns (mean_stack, covered) where ``covered`` marks pixels inside at
    least one window; uncovered pixels are zero in the mean.
    """
    if not view_maps:
        raise ValueError("need at least one view")
    acc = None
    cov_total = np.zeros((spec.source_h, spec.source_w))
    for view, maps in enumerate(view_maps):
        aligned, cov = invert_augment(_map_stack(maps), spec, view)
        cov_total += cov
        acc = aligned if acc is None else ag.add(acc, aligned)
    covered = cov_total > 0
    denom = np.maximum(cov_total, 1.0)[None, :, :]
    return ag.div(acc, denom), covered


def entropy_loss(view_maps: Sequence, spec: AugmentSpec,
                 normalize_classes: bool = True):
    """Mean per-pixel entropy of the fused class distribution.

    Views are reverse-aligned and averaged with coverage masks; pixels covered
    by no view are excluded. Per pixel the class vector is clamped at 1e-12
    and (by default) normalized to sum 1 before the entropy sum.
    """
    fused, covered = fuse_views(view_maps, spec)
    return _entropy_of_fused(fused, covered, normalize_classes)


def _entropy_of_fused(fused, covered, normalize_classes: bool = True):
    if not covered.any():
        return 0.0
    c = ag.value_of(fused).shape[0]
    flat = ag.reshape(fused, (c, covered.size))
    clamped = ag.clamp_min(flat, 1e-12)
    if normalize_classes:
        probs = ag.div(clamped, ag.asum(clamped, axis=0, keepdims=True))
    else:
        probs = clamped
    ent = ag.mul(ag.asum(ag.mul(probs, ag.log(probs)), axis=0), -1.0)
    weights = covered.reshape(-1).astype(np.float64)
    return ag.div(ag.dot(ent, weights), float(weights.sum()))


def total_loss(dist: DistanceMatrix, view_maps: Sequence, spec: AugmentSpec,
               alpha: float = DEFAULT_ALPHA, scale: float = DEFAULT_ANCHOR_SCALE,
               center: float = DEFAULT_ANCHOR_CENTER, symmetric: bool = False,
               normalize_classes: bool = True):
    """Cluster + alpha * entropy on the coverage-weighted mean maps.

    Returns (loss_node, LossBreakdown); the node carries the gradient chain and
    the breakdown the plain float values plus per-class degeneracy flags.
    """
    fused, covered = fuse_views(view_maps, spec)
    # pixels no view covers carry zeros in the fused maps; excluding them from
    # the cluster sums keeps the loss a statement about observed pixels rather
    # than about the crop pattern
    mask = None if covered.all() else covered
    cluster = cluster_loss(dist, fused, scale, center, symmetric=symmetric, mask=mask)
    entropy = _entropy_of_fused(fused, covered, normalize_classes)
    total = ag.add(cluster, ag.mul(entropy, alpha)) if alpha != 0 else cluster
    flags = class_degenerate_flags(fused, scale, center, mask=mask)
    cluster_v = float(ag.value_of(cluster))
    entropy_v = float(ag.value_of(entropy))
    breakdown = LossBreakdown(
        cluster=cluster_v,
        entropy=entropy_v,
        total=cluster_v + alpha * entropy_v,
        alpha=alpha,
        degenerate_flags=flags,
    )
    return total, breakdown
