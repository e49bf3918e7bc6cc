"""Brute-force reference implementations used to cross-check the fast kernels.

Everything here is deliberately written as plain nested Python loops over
scalars (arrays are converted to lists first) and shares no code with the
vectorized paths. Only suitable for small grids.
"""

from __future__ import annotations

import math

import numpy as np

LOG_CLAMP = 1e-12


def skl_matrix_loops(a_self) -> np.ndarray:
    """Per-pair symmetric KL by direct summation."""
    rows = np.asarray(a_self, dtype=np.float64).tolist()
    n = len(rows)
    out = [[0.0] * n for _ in range(n)]
    for p in range(n):
        rp = rows[p]
        for q in range(p + 1, n):
            rq = rows[q]
            acc = 0.0
            for m in range(len(rp)):
                x = max(rp[m], LOG_CLAMP)
                y = max(rq[m], LOG_CLAMP)
                acc += x * math.log(x / y) + y * math.log(y / x)
            acc = max(acc, 0.0)
            out[p][q] = acc
            out[q][p] = acc
    return np.array(out)


def point_to_map_loops(s, pixel: int, score_map) -> float:
    srow = np.asarray(s)[pixel].tolist()
    m = np.asarray(score_map, dtype=np.float64).reshape(-1).tolist()
    denom = sum(m)
    if denom <= 1e-12:
        return 0.0
    num = 0.0
    for q in range(len(m)):
        num += srow[q] * m[q]
    return num / denom


def soft_anchor_loops(score_map, scale: float, center: float) -> np.ndarray:
    m = np.asarray(score_map, dtype=np.float64).reshape(-1)
    out = [1.0 / (1.0 + math.exp(-scale * (v - center))) for v in m.tolist()]
    return np.array(out)


def anchor_to_map_loops(s, anchor, score_map) -> float:
    a = np.asarray(anchor, dtype=np.float64).reshape(-1).tolist()
    m = np.asarray(score_map, dtype=np.float64).reshape(-1).tolist()
    a_total = sum(a)
    m_total = sum(m)
    if a_total <= 1e-12 or m_total <= 1e-12:
        return 0.0
    total = 0.0
    for p in range(len(a)):
        total += a[p] * point_to_map_loops(s, p, m)
    return total / a_total


def d_intra_loops(s, maps, scale: float, center: float) -> float:
    total = 0.0
    for m in maps:
        anchor = soft_anchor_loops(m, scale, center)
        total += anchor_to_map_loops(s, anchor, m)
    return total


def d_inter_loops(s, maps, scale: float, center: float) -> float:
    c = len(maps)
    total = 0.0
    for lo in range(c - 1):
        for hi in range(lo + 1, c):
            anchor = soft_anchor_loops(maps[hi], scale, center)
            total += anchor_to_map_loops(s, anchor, maps[lo])
    return total


def cluster_loss_loops(s, maps, scale: float, center: float) -> float:
    c = len(maps)
    if c < 2:
        raise ValueError("cluster loss needs at least two classes")
    intra = d_intra_loops(s, maps, scale, center)
    inter = d_inter_loops(s, maps, scale, center)
    return intra / c - 2.0 * inter / (c * (c - 1))


def entropy_loss_loops(maps, covered=None) -> float:
    """Mean per-pixel entropy of the class-normalized map vectors."""
    stack = np.asarray(maps, dtype=np.float64)
    c, h, w = stack.shape
    vals = stack.reshape(c, h * w).T.tolist()
    if covered is None:
        mask = [True] * (h * w)
    else:
        mask = np.asarray(covered).reshape(-1).astype(bool).tolist()
    total = 0.0
    count = 0
    for p in range(h * w):
        if not mask[p]:
            continue
        vec = [max(v, 1e-12) for v in vals[p]]
        z = sum(vec)
        ent = 0.0
        for v in vec:
            pr = v / z
            ent -= pr * math.log(pr)
        total += ent
        count += 1
    if count == 0:
        return 0.0
    return total / count
