"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable operation in the pipeline is expressed through the
functions in this module. Each function works on plain ndarrays (returning an
ndarray) or on :class:`Tensor` nodes (returning a new node whose vector-Jacobian
product is recorded), so the same pipeline code serves both the plain forward
path and the gradient chain.

Only the ops the segmentation pipeline needs are implemented; gradients are
accumulated in float64.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the reverse-mode tape.

    ``value`` is a float64 ndarray. Leaf tensors (no parents) receive gradients
    in ``grad`` after :meth:`backward`. Constants never become tensors: ops
    return plain ndarrays when no input is a Tensor, so the recorded graph only
    contains the parameter-dependent spine.
    """

    __slots__ = ("value", "grad", "_parents", "_pulls")

    # Defer numpy's binary operators to the reflected methods below, so
    # ndarray @ Tensor lands in __rmatmul__ instead of elementwise coercion.
    __array_ufunc__ = None

    def __init__(self, value, _parents=(), _pulls=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._pulls = _pulls  # one pullback per parent: g_out -> g_parent

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={not self._parents})"

    # Operator sugar; functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, seed=None):
        """Backpropagate from this node; accumulates into leaf ``.grad``.

        ``seed`` defaults to ones (suitable for scalar outputs). Iterative
        topological order, so deep per-step graphs cannot hit the recursion
        limit.
        """
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        if seed is None:
            seed = np.ones_like(self.value)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node.grad is None or not node._parents:
                continue
            for parent, pull in zip(node._parents, node._pulls):
                g = pull(node.grad)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def is_tensor(x):
    return isinstance(x, Tensor)


def value_of(x):
    """The plain ndarray behind ``x`` (pass-through for non-tensors)."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _node(out_value, pulls):
    """Build a Tensor from (parent, pullback) pairs, or pass the ndarray through."""
    pulls = [(p, f) for p, f in pulls if isinstance(p, Tensor)]
    if not pulls:
        return out_value
    parents = tuple(p for p, _ in pulls)
    fns = tuple(f for _, f in pulls)
    return Tensor(out_value, parents, fns)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _node(out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _node(out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _node(out, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _node(out, [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ])


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    return _node(out, [(x, lambda g: g / xv)])


def exp(x):
    xv = value_of(x)
    out = np.exp(xv)
    return _node(out, [(x, lambda g: g * out)])


def sigmoid(x):
    xv = value_of(x)
    # Stable in both tails.
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, [(x, lambda g: g * out * (1.0 - out))])


def clamp_min(x, lo):
    """max(x, lo); gradient is zero where the clamp is active."""
    xv = value_of(x)
    out = np.maximum(xv, lo)
    mask = (xv > lo).astype(np.float64)
    return _node(out, [(x, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# reductions


def asum(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _node(out, [(x, pull)])


def amean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return div(asum(x, axis=axis, keepdims=keepdims), float(n))


def _extreme(x, axis, keepdims, np_fn):
    xv = value_of(x)
    out = np_fn(xv, axis=axis, keepdims=keepdims)

    def pull(g):
        g = np.asarray(g)
        out_k = out if (keepdims or axis is None) else np.expand_dims(out, axis)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        mask = (xv == out_k).astype(np.float64)
        # Ties split the gradient evenly.
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return mask * g / counts

    return _node(out, [(x, pull)])


def amax(x, axis=None, keepdims=False):
    return _extreme(x, axis, keepdims, np.max)


def amin(x, axis=None, keepdims=False):
    return _extreme(x, axis, keepdims, np.min)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if av.ndim == 2 and bv.ndim == 2:
        pulls = [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)]
    elif av.ndim == 2 and bv.ndim == 1:
        pulls = [(a, lambda g: np.outer(g, bv)), (b, lambda g: av.T @ g)]
    elif av.ndim == 1 and bv.ndim == 2:
        pulls = [(a, lambda g: bv @ g), (b, lambda g: np.outer(av, g))]
    elif av.ndim == 1 and bv.ndim == 1:
        pulls = [(a, lambda g: g * bv), (b, lambda g: g * av)]
    else:
        raise ValueError(f"matmul supports 1D/2D operands, got {av.ndim}D @ {bv.ndim}D")
    return _node(out, [p for p in pulls])


def dot(a, b):
    """Inner product of equal-shape arrays (sum of elementwise product)."""
    return asum(mul(a, b))


def transpose(x, axes=None):
    xv = value_of(x)
    out = np.transpose(xv, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def pull(g):
        return np.transpose(g, inv)

    return _node(out, [(x, pull)])


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _node(out, [(x, lambda g: g.reshape(xv.shape))])


def getitem(x, idx):
    """Basic (non-fancy) indexing; the pullback scatters into zeros."""
    xv = value_of(x)
    out = xv[idx]

    def pull(g):
        full = np.zeros_like(xv)
        full[idx] = g
        return full

    return _node(out, [(x, pull)])


def embed(x, full_shape, top, left):
    """Paste ``x`` into a zero array of ``full_shape`` at (top, left).

    ``x`` has shape (h, w, ...) and the leading two axes of ``full_shape`` must
    contain the window. Inverse of a 2D crop.
    """
    xv = value_of(x)
    h, w = xv.shape[0], xv.shape[1]
    if top < 0 or left < 0 or top + h > full_shape[0] or left + w > full_shape[1]:
        raise ValueError(f"window {h}x{w}@({top},{left}) outside grid {full_shape[:2]}")
    out = np.zeros(full_shape, dtype=np.float64)
    out[top:top + h, left:left + w] = xv

    def pull(g):
        return g[top:top + h, left:left + w]

    return _node(out, [(x, pull)])


def stack(xs, axis=0):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)

    def make_pull(i):
        return lambda g: np.take(g, i, axis=axis)

    return _node(out, [(x, make_pull(i)) for i, x in enumerate(xs)])


def concat(xs, axis=0):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make_pull(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, [(x, make_pull(i)) for i, x in enumerate(xs)])


def softmax_rows(x):
    """Softmax over the last axis, fused for stability."""
    xv = value_of(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def pull(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _node(out, [(x, pull)])
