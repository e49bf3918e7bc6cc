"""Score-map primitives and multi-resolution attention aggregation.

A score map is a 2D float array (H, W); token/class map stacks are (H, W, K)
or (C, H, W). All resampling is corner-aligned bilinear, implemented as fixed
interpolation matrices so gradients flow through plain matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autograd as ag

FILE_RESOLUTIONS = (8, 16, 32, 64)

EPS_DEGENERATE = 1e-12
ROW_SUM_TOL = 1e-3


@lru_cache(maxsize=128)
def resize_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) corner-aligned bilinear interpolation weights.

    Output sample i reads source position i*(src-1)/(dst-1); a single output
    sample reads the source center.
    """
    if src < 1 or dst < 1:
        raise ValueError(f"resize dims must be >= 1, got src={src} dst={dst}")
    mat = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        mat[:, 0] = 1.0
        return mat
    if dst == 1:
        pos = np.array([0.5 * (src - 1)])
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, src - 2)
    frac = pos - lo
    mat[np.arange(dst), lo] = 1.0 - frac
    mat[np.arange(dst), lo + 1] = frac
    return mat


def bilinear_resize(score_map, target_h: int, target_w: int):
    """Resample a 2D map (or an (H, W, K) stack) to (target_h, target_w)."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {target_h}x{target_w}")
    v = ag.value_of(score_map)
    if v.ndim not in (2, 3):
        raise ValueError(f"expected 2D map or 3D stack, got {v.ndim}D")
    h, w = v.shape[0], v.shape[1]
    rh = resize_matrix(h, target_h)
    rw = resize_matrix(w, target_w)
    if v.ndim == 2:
        return ag.matmul(ag.matmul(rh, score_map), rw.T)
    # (h, w, K): contract height, then width.
    k = v.shape[2]
    x = ag.reshape(score_map, (h, w * k))
    x = ag.matmul(rh, x)                                # (H, w*K)
    x = ag.reshape(x, (target_h, w, k))
    x = ag.transpose(x, (1, 0, 2))                      # (w, H, K)
    x = ag.reshape(x, (w, target_h * k))
    x = ag.matmul(rw, x)                                # (W, H*K)
    x = ag.reshape(x, (target_w, target_h, k))
    return ag.transpose(x, (1, 0, 2))


def minmax_norm(score_map):
    """(v - min) / (max - min); all zeros when the spread is below 1e-12."""
    v = ag.value_of(score_map)
    if not np.all(np.isfinite(v)):
        raise ValueError("minmax_norm requires finite values")
    spread = float(v.max() - v.min())
    if spread < EPS_DEGENERATE:
        return np.zeros_like(v)
    lo = ag.amin(score_map)
    return ag.div(ag.sub(score_map, lo), ag.sub(ag.amax(score_map), lo))


def minmax_norm_cols(mat):
    """Column-wise min-max over an (N, K) matrix; degenerate columns go to zero."""
    v = ag.value_of(mat)
    spread = v.max(axis=0) - v.min(axis=0)
    live = spread >= EPS_DEGENERATE
    if not live.any():
        return np.zeros_like(v)
    lo = ag.amin(mat, axis=0, keepdims=True)
    rng = ag.sub(ag.amax(mat, axis=0, keepdims=True), lo)
    # Dead columns divide by 1 and are then masked to zero.
    safe = ag.add(rng, (~live).astype(np.float64)[None, :])
    out = ag.div(ag.sub(mat, lo), safe)
    return ag.mul(out, live.astype(np.float64)[None, :])


@dataclass(frozen=True)
class AggregationWeights:
    """Nonnegative per-resolution weights summing to one."""

    weights: Mapping[int, float]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("AggregationWeights needs at least one resolution")
        vals = np.array(list(self.weights.values()), dtype=np.float64)
        if (vals < 0).any():
            raise ValueError("aggregation weights must be nonnegative")
        if abs(vals.sum() - 1.0) > 1e-9:
            raise ValueError(f"aggregation weights must sum to 1, got {vals.sum()}")

    @classmethod
    def one_hot(cls, resolution: int) -> "AggregationWeights":
        return cls({int(resolution): 1.0})

    @classmethod
    def uniform(cls, resolutions: Sequence[int]) -> "AggregationWeights":
        rs = [int(r) for r in resolutions]
        return cls({r: 1.0 / len(rs) for r in rs})


DEFAULT_WEIGHTS = AggregationWeights.one_hot(16)


@dataclass(frozen=True)
class AttentionBundle:
    """Per-resolution attention stacks plus token/class metadata.

    ``self_layers[r]`` holds (HW_r, HW_r) row-stochastic arrays and
    ``cross_layers[r]`` (HW_r, K) arrays (possibly autograd Tensors when
    produced by a differentiable backend). Keys are nominal resolutions; the
    actual grid side (differs under crops) lives in ``grid_sides``.
    ``class_spans`` maps class index -> half-open token range, or None for a
    class with no tokens of its own (only legal for the background class).
    """

    resolutions: tuple
    self_layers: Mapping[int, list]
    cross_layers: Mapping[int, list]
    tokens: tuple
    class_spans: tuple
    background_class: Optional[int] = None
    grid_sides: Mapping[int, int] = field(default_factory=dict)
    class_names: tuple = ()

    def __post_init__(self):
        if not self.grid_sides:
            object.__setattr__(self, "grid_sides", {r: r for r in self.resolutions})
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(
                "background" if span is None else " ".join(self.tokens[span[0]:span[1]])
                for span in self.class_spans))
        k = len(self.tokens)
        seen = np.zeros(k, dtype=bool)
        for c, span in enumerate(self.class_spans):
            if span is None:
                if c != self.background_class:
                    raise ValueError(f"class {c} has no token span and is not the background class")
                continue
            a, b = span
            if not (0 <= a < b <= k):
                raise ValueError(f"class {c} span {span} outside token range [0, {k})")
            if seen[a:b].any():
                raise ValueError(f"class {c} span {span} overlaps another class")
            seen[a:b] = True
        for r in self.resolutions:
            side = self.grid_sides[r]
            for i, layer in enumerate(self.self_layers.get(r, [])):
                check_row_stochastic(ag.value_of(layer), f"self res {r} layer {i}", side * side)
            for i, layer in enumerate(self.cross_layers.get(r, [])):
                v = ag.value_of(layer)
                if v.shape != (side * side, k):
                    raise ValueError(
                        f"cross res {r} layer {i}: shape {v.shape} != ({side * side}, {k})")

    @property
    def num_classes(self) -> int:
        return len(self.class_spans)


def check_row_stochastic(mat: np.ndarray, what: str, expected_side=None):
    """Rows must be nonnegative and sum to 1 within ROW_SUM_TOL."""
    if expected_side is not None and mat.shape != (expected_side, expected_side):
        raise ValueError(f"{what}: shape {mat.shape} != ({expected_side}, {expected_side})")
    if mat.min() < 0:
        bad = np.unravel_index(np.argmin(mat), mat.shape)
        raise ValueError(f"{what}: negative entry at {bad}")
    sums = mat.sum(axis=1)
    err = np.abs(sums - 1.0)
    row = int(np.argmax(err))
    if err[row] > ROW_SUM_TOL:
        raise ValueError(f"{what}: row {row} sums to {sums[row]:.6f}, not 1")


def _upsample_self(layer, src_side: int, dst_side: int):
    """Resize an (hw, hw) self-attention map on its (h, w, h, w) view.

    Key axes first, then query axes, then rows renormalized to sum 1.
    """
    if src_side == dst_side:
        return layer
    r = resize_matrix(src_side, dst_side)
    x = ag.reshape(layer, (src_side, src_side, src_side, src_side))
    for axis in (3, 2, 1, 0):  # key axes, then query axes
        x = _mode_dot(x, r, axis)
    x = ag.reshape(x, (dst_side * dst_side, dst_side * dst_side))
    row_sums = ag.asum(x, axis=1, keepdims=True)
    return ag.div(x, row_sums)


def _mode_dot(x, mat, axis):
    """Contract axis ``axis`` of a 4D array with ``mat`` (rows index the output)."""
    perm = [a for a in range(4) if a != axis] + [axis]
    xp = ag.transpose(x, perm)
    shp = ag.value_of(xp).shape
    flat = ag.reshape(xp, (int(np.prod(shp[:3])), shp[3]))
    out = ag.matmul(flat, mat.T)
    out = ag.reshape(out, shp[:3] + (mat.shape[0],))
    inv = np.argsort(perm)
    return ag.transpose(out, tuple(inv))


def _upsample_cross(layer, src_side: int, dst_side: int):
    if src_side == dst_side:
        return layer
    k = ag.value_of(layer).shape[1]
    grid = ag.reshape(layer, (src_side, src_side, k))
    grid = bilinear_resize(grid, dst_side, dst_side)
    return ag.reshape(grid, (dst_side * dst_side, k))


def _mean_layers(layers):
    if len(layers) == 1:
        return layers[0]
    acc = layers[0]
    for layer in layers[1:]:
        acc = ag.add(acc, layer)
    return ag.div(acc, float(len(layers)))


def aggregate_attention(bundle: AttentionBundle, weights: AggregationWeights,
                        target_side: int = 64):
    """Average layers per resolution, upsample to the target grid, weighted-sum.

    Returns (A_self, A_cross) on the (target_side**2) grid. A_self rows are
    renormalized to sum 1 after upsampling.
    """
    active = [r for r, w in weights.weights.items()
              if w > 0 and bundle.self_layers.get(r) and bundle.cross_layers.get(r)]
    if not active:
        raise ValueError("no attention layers at any weighted resolution")
    total = sum(weights.weights[r] for r in active)
    a_self = None
    a_cross = None
    for r in active:
        side = bundle.grid_sides[r]
        w = weights.weights[r] / total
        s = _upsample_self(_mean_layers(bundle.self_layers[r]), side, target_side)
        c = _upsample_cross(_mean_layers(bundle.cross_layers[r]), side, target_side)
        s, c = ag.mul(s, w), ag.mul(c, w)
        a_self = s if a_self is None else ag.add(a_self, s)
        a_cross = c if a_cross is None else ag.add(a_cross, c)
    return a_self, a_cross
