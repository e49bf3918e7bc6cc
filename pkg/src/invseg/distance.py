"""Symmetric-KL pixel-pair distances and the weighted reductions over maps.

The (HW, HW) distance matrix is built once per (image, timestep) from the
aggregated self-attention via the GEMM identity

    S = e 1^T + 1 e^T - A (log A)^T - (log A) A^T,   e_p = sum_m A_pm log A_pm,

stored in float32, and is constant with respect to the learnable prompt, so
reductions against it are ordinary matrix-vector products in the gradient
chain (double-precision operands).
"""

from __future__ import annotations

import os

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag

LOG_CLAMP = 1e-12
EPS_DEGENERATE = 1e-12

THREADS_ENV = "INVSEG_THREADS"


def kernel_thread_cap():
    """Thread cap from the INVSEG_THREADS environment variable, or None."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {raw}")
    return n


class DistanceMatrix:
    """Symmetric nonnegative (HW, HW) float32 matrix with a zero diagonal."""

    __slots__ = ("values", "side", "_f64")

    def __init__(self, values: np.ndarray):
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"distance matrix must be square, got {values.shape}")
        self.values = values
        self.side = values.shape[0]
        self._f64 = None

    def as_f64(self) -> np.ndarray:
        """Double-precision operand for reductions (cached)."""
        if self._f64 is None:
            self._f64 = self.values.astype(np.float64)
        return self._f64


def skl_matrix(a_self: np.ndarray) -> DistanceMatrix:
    """Pairwise symmetric KL between rows of a row-stochastic matrix.

    Probabilities are clamped at 1e-12 before logs. One dense GEMM; no
    per-pair loops. Respects INVSEG_THREADS.
    """
    a = np.asarray(a_self)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square row-stochastic matrix, got {a.shape}")
    if a.min() < 0:
        raise ValueError("self-attention entries must be nonnegative")
    sums = a.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-3:
        row = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"row {row} sums to {sums[row]:.6f}, not 1")

    a32 = np.maximum(a, LOG_CLAMP).astype(np.float32, copy=False)
    log_a = np.log(a32)
    e = np.einsum("ij,ij->i", a32, log_a)
    cap = kernel_thread_cap()
    if cap is None:
        b = a32 @ log_a.T
    else:
        with threadpool_limits(limits=cap):
            b = a32 @ log_a.T
    del log_a
    cross = b + b.T  # elementwise, exactly symmetric
    del b
    s = np.add.outer(e, e)  # exactly symmetric
    s -= cross
    del cross
    np.fill_diagonal(s, 0.0)
    np.maximum(s, 0.0, out=s)
    return DistanceMatrix(s)


def point_to_map_distance(dist: DistanceMatrix, pixel: int, score_map):
    """Map-weighted mean distance from one pixel: (S[p] . M) / sum(M).

    Returns 0 for an all-zero map (degenerate; callers flag it).
    """
    m = _flat(score_map)
    total = float(ag.value_of(m).sum())
    if total <= EPS_DEGENERATE:
        return 0.0
    row = dist.as_f64()[pixel]
    return ag.div(ag.dot(row, m), ag.asum(m))


def soft_anchors(score_map, scale: float, center: float = 0.5):
    """Sigmoid soft selection of confident pixels: sigma(scale * (M - center))."""
    if scale <= 0:
        raise ValueError(f"anchor scale must be positive, got {scale}")
    return ag.sigmoid(ag.mul(ag.sub(score_map, center), scale))


def anchor_to_map_distance(dist: DistanceMatrix, anchor, score_map):
    """Anchor-weighted mean of per-pixel map distances.

    (sum_p anchor[p] * D(p, M)) / sum_p anchor[p]; 0 when either the anchor or
    the map is all-zero (degenerate).
    """
    a = _flat(anchor)
    m = _flat(score_map)
    a_total = float(ag.value_of(a).sum())
    m_total = float(ag.value_of(m).sum())
    if a_total <= EPS_DEGENERATE or m_total <= EPS_DEGENERATE:
        return 0.0
    per_pixel = ag.div(ag.matmul(dist.as_f64(), m), ag.asum(m))  # D(p, M) for all p
    return ag.div(ag.dot(a, per_pixel), ag.asum(a))


def _flat(x):
    v = ag.value_of(x)
    if v.ndim == 1:
        return x
    return ag.reshape(x, (v.size,))
