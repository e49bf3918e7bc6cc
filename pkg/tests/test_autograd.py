"""Checks for the reverse-mode tape: values, pullbacks, broadcasting."""

import numpy as np
import pytest

from invseg import autograd as ag


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def check_op(build, *shapes, seed=0, tol=1e-6):
    """Compare tape gradients with finite differences for every input."""
    rng = np.random.default_rng(seed)
    values = [rng.uniform(0.5, 1.5, size=s) for s in shapes]
    leaves = [ag.Tensor(v) for v in values]
    out = build(*leaves)
    total = out if np.isscalar(ag.value_of(out)) or ag.value_of(out).ndim == 0 \
        else ag.asum(out)
    total.backward()
    for i, leaf in enumerate(leaves):
        def scalar(v, i=i):
            args = [values[j] if j != i else v for j in range(len(values))]
            return float(ag.value_of(ag.asum(build(*args))))
        fd = fd_grad(scalar, values[i])
        got = leaf.grad if leaf.grad is not None else np.zeros_like(values[i])
        assert np.allclose(got, fd, atol=tol), f"input {i}: {got} vs {fd}"


def test_constants_stay_plain():
    out = ag.add(np.ones(3), 2.0)
    assert isinstance(out, np.ndarray)
    out = ag.mul(ag.asum(np.ones(3)), 0.5)
    assert not ag.is_tensor(out)


def test_value_of_passthrough():
    x = np.arange(4.0)
    assert ag.value_of(x) is not None
    t = ag.Tensor(x)
    assert np.array_equal(ag.value_of(t), x)
    assert ag.value_of([1, 2]).dtype == np.float64


def test_elementwise_grads():
    check_op(lambda a, b: ag.add(a, b), (3, 4), (3, 4))
    check_op(lambda a, b: ag.sub(a, b), (3, 4), (3, 4))
    check_op(lambda a, b: ag.mul(a, b), (3, 4), (3, 4))
    check_op(lambda a, b: ag.div(a, b), (3, 4), (3, 4))
    check_op(lambda a: ag.log(a), (5,))
    check_op(lambda a: ag.exp(a), (5,))
    check_op(lambda a: ag.sigmoid(a), (5,))


def test_broadcast_grads_unbroadcast():
    check_op(lambda a, b: ag.mul(a, b), (3, 4), (4,))
    check_op(lambda a, b: ag.add(a, b), (3, 1), (1, 4))
    check_op(lambda a, b: ag.div(a, b), (2, 3, 4), (3, 4))


def test_scalar_broadcast():
    x = ag.Tensor(np.ones((2, 2)))
    out = ag.asum(ag.mul(x, 3.0))
    out.backward()
    assert np.allclose(x.grad, 3.0 * np.ones((2, 2)))


def test_clamp_min_gradient_mask():
    x = ag.Tensor(np.array([-1.0, 0.5, 2.0]))
    out = ag.asum(ag.clamp_min(x, 0.0))
    out.backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0])
    assert np.array_equal(ag.value_of(ag.clamp_min(np.array([-1.0, 2.0]), 0.0)),
                          [0.0, 2.0])


def test_sigmoid_stable_in_tails():
    v = ag.value_of(ag.sigmoid(np.array([-800.0, 0.0, 800.0])))
    assert np.all(np.isfinite(v))
    assert v[0] == 0.0 and v[1] == 0.5 and v[2] == 1.0


def test_reduction_grads():
    check_op(lambda a: ag.asum(a, axis=0), (3, 4))
    check_op(lambda a: ag.asum(a, axis=1, keepdims=True), (3, 4))
    check_op(lambda a: ag.amean(a, axis=1), (3, 4))
    check_op(lambda a: ag.amean(a), (6,))


def test_extreme_grads_and_tie_split():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(4, 5))  # distinct values, no ties
    check_op(lambda a: ag.amax(a, axis=0), (4, 5), seed=3)
    check_op(lambda a: ag.amin(a, axis=1), (4, 5), seed=3)
    t = ag.Tensor(np.array([2.0, 2.0, 1.0]))
    ag.amax(t).backward()
    assert np.allclose(t.grad, [0.5, 0.5, 0.0])


def test_matmul_grads_all_ranks():
    check_op(lambda a, b: ag.matmul(a, b), (3, 4), (4, 2))
    check_op(lambda a, b: ag.matmul(a, b), (3, 4), (4,))
    check_op(lambda a, b: ag.matmul(a, b), (4,), (4, 2))
    check_op(lambda a, b: ag.matmul(a, b), (4,), (4,))
    with pytest.raises(ValueError):
        ag.matmul(np.ones((2, 2, 2)), np.ones((2, 2)))


def test_dot_is_sum_of_products(rng):
    a, b = rng.uniform(size=6), rng.uniform(size=6)
    assert np.isclose(float(ag.value_of(ag.dot(a, b))), float(a @ b))
    check_op(lambda x, y: ag.dot(x, y), (6,), (6,))


def test_shape_op_grads():
    check_op(lambda a: ag.transpose(a), (3, 4))
    check_op(lambda a: ag.transpose(a, (2, 0, 1)), (2, 3, 4))
    check_op(lambda a: ag.reshape(a, (12,)), (3, 4))
    check_op(lambda a: ag.getitem(a, (slice(1, 3), slice(None))), (4, 5))
    check_op(lambda a: ag.embed(a, (5, 6), 1, 2), (3, 3))
    check_op(lambda a, b: ag.stack([a, b], axis=0), (3,), (3,))
    check_op(lambda a, b: ag.concat([a, b], axis=1), (2, 3), (2, 2))


def test_embed_rejects_out_of_range():
    with pytest.raises(ValueError):
        ag.embed(np.ones((4, 4)), (5, 5), 2, 2)


def test_getitem_sugar():
    x = ag.Tensor(np.arange(6.0).reshape(2, 3))
    out = ag.asum(x[0])
    out.backward()
    assert np.array_equal(x.grad, [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])


def test_softmax_rows_values_and_grad(rng):
    x = rng.normal(size=(4, 5))
    out = ag.value_of(ag.softmax_rows(x))
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    assert np.allclose(out, e / e.sum(axis=1, keepdims=True))
    check_op(lambda a: ag.mul(ag.softmax_rows(a), np.arange(10.0).reshape(2, 5)),
             (2, 5))


def test_operator_sugar_matches_functions(rng):
    a = ag.Tensor(rng.uniform(1.0, 2.0, size=(2, 2)))
    b = rng.uniform(1.0, 2.0, size=(2, 2))
    assert np.allclose(ag.value_of(a + b), ag.value_of(ag.add(a, b)))
    assert np.allclose(ag.value_of(b - a), ag.value_of(ag.sub(b, a)))
    assert np.allclose(ag.value_of(a * 2.0), 2.0 * ag.value_of(a))
    assert np.allclose(ag.value_of(1.0 / a), 1.0 / ag.value_of(a))
    assert np.allclose(ag.value_of(-a), -ag.value_of(a))
    assert np.allclose(ag.value_of(a @ b), ag.value_of(a) @ b)
    assert np.allclose(ag.value_of(b @ a), b @ ag.value_of(a))


def test_backward_accumulates_over_reuse():
    x = ag.Tensor(np.array([3.0]))
    out = ag.add(ag.mul(x, x), x)  # x^2 + x -> grad 2x + 1
    out.backward()
    assert np.allclose(x.grad, [7.0])


def test_backward_seed():
    x = ag.Tensor(np.ones(3))
    y = ag.mul(x, 2.0)
    y.backward(seed=np.array([1.0, 0.0, 5.0]))
    assert np.allclose(x.grad, [2.0, 0.0, 10.0])


def test_backward_resets_stale_grads():
    x = ag.Tensor(np.ones(2))
    y = ag.asum(ag.mul(x, 3.0))
    y.backward()
    first = x.grad.copy()
    y.backward()
    assert np.array_equal(x.grad, first)  # not doubled by the second pass


def test_deep_chain_no_recursion_limit():
    x = ag.Tensor(np.array([1.0]))
    node = x
    for _ in range(5000):
        node = ag.add(node, 0.0)
    ag.asum(node).backward()
    assert np.allclose(x.grad, [1.0])


def test_composite_pipeline_grad(rng):
    """A refine-like chain: matmul, normalization, sigmoid, weighted mean."""
    s = rng.dirichlet(np.ones(6), size=6)

    def build(c):
        prod = ag.matmul(s, c)
        lo = ag.amin(prod, axis=0, keepdims=True)
        rng_ = ag.sub(ag.amax(prod, axis=0, keepdims=True), lo)
        normed = ag.div(ag.sub(prod, lo), ag.add(rng_, 1e-3))
        anchors = ag.sigmoid(ag.mul(ag.sub(normed, 0.5), 4.0))
        return ag.amean(ag.mul(anchors, normed))

    check_op(build, (6, 2), seed=5, tol=1e-5)
