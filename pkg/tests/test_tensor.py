import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toposeg import tensor as T
from toposeg.tensor import Tensor


def brute_block_max(m, s):
    b, c, h, w = m.shape
    oh, ow = -(-h // s), -(-w // s)
    out = np.zeros((b, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            box = m[:, :, i * s:(i + 1) * s, j * s:(j + 1) * s]
            full = box.shape[2] == s and box.shape[3] == s
            mx = box.max(axis=(2, 3))
            out[:, :, i, j] = mx if full else np.maximum(mx, 0.0)
    return out


def brute_correlate(m, k):
    h, w = m.shape
    kh, kw = k.shape
    rh, rw = kh // 2, kw // 2
    p = np.zeros((h + 2 * rh, w + 2 * rw))
    p[rh:rh + h, rw:rw + w] = m
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = sum(p[y + u, x + v] * k[u, v] for u in range(kh) for v in range(kw))
    return out


# -- block max pool ------------------------------------------------------------


def test_block_max_pool_constant_and_zero():
    assert np.array_equal(T.block_max_pool(Tensor(np.ones((1, 1, 4, 4))), 2).data, np.ones((1, 1, 2, 2)))
    assert np.array_equal(T.block_max_pool(Tensor(np.zeros((1, 1, 4, 4))), 4).data, np.zeros((1, 1, 1, 1)))


def test_block_max_pool_matches_brute_force_with_padding():
    m = np.random.default_rng(0).random((1, 1, 5, 5))
    out = T.block_max_pool(Tensor(m), 2)
    assert out.shape == (1, 1, 3, 3)
    assert np.array_equal(out.data, brute_block_max(m, 2))


def test_block_max_pool_rejects_bad_size():
    with pytest.raises(ValueError):
        T.block_max_pool(Tensor(np.zeros((1, 1, 4, 4))), 0)


def test_block_max_pool_identity_at_unit_scale():
    m = np.random.default_rng(1).normal(size=(2, 3, 5, 7))
    assert np.array_equal(T.block_max_pool(Tensor(m), 1).data, m)


def test_block_max_pool_gradient_goes_to_first_maximum():
    m = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    g = T.backward(T.reduce_sum(T.block_max_pool(m, 2)))[m]
    assert np.array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    s=st.integers(1, 5),
    seed=st.integers(0, 2**16),
)
def test_block_max_pool_property(h, w, s, seed):
    m = np.random.default_rng(seed).normal(size=(1, 2, h, w))
    assert np.array_equal(T.block_max_pool(Tensor(m), s).data, brute_block_max(m, s))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), size=st.integers(4, 20))
def test_pooled_mask_mass_non_increasing_in_scale(seed, size):
    # only nested box grids are ordered; a 3-box can split what a 2-box held
    mask = (np.random.default_rng(seed).random((1, 1, size, size)) < 0.3).astype(float)
    scales = [s for s in (1, 2, 4, 8, 16) if s <= size]
    totals = [T.block_max_pool(Tensor(mask), s).data.sum() for s in scales]
    assert all(b <= a for a, b in zip(totals, totals[1:]))


# -- filters -------------------------------------------------------------------


def test_mean_filter_examples():
    c = T.mean_filter_3x3(Tensor(np.full((1, 1, 5, 5), 2.5)))
    assert c.data[0, 0, 2, 2] == pytest.approx(2.5)
    assert T.mean_filter_3x3(Tensor(np.full((1, 1, 1, 1), 9.0))).data.item() == pytest.approx(1.0)


def test_mean_filter_matches_brute_force():
    m = np.random.default_rng(2).random((1, 1, 4, 4))
    expect = brute_correlate(m[0, 0], np.full((3, 3), 1 / 9))
    assert np.allclose(T.mean_filter_3x3(Tensor(m)).data[0, 0], expect, atol=1e-15)


def test_conv2d_fixed_examples():
    sobel = np.array([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]])
    const = np.full((1, 1, 5, 5), 0.7)
    inner = T.conv2d_fixed(Tensor(const), sobel).data[0, 0, 1:-1, 1:-1]
    assert np.allclose(inner, 0.0)
    ident = np.zeros((3, 3))
    ident[1, 1] = 1
    m = np.random.default_rng(3).random((1, 1, 5, 5))
    assert np.array_equal(T.conv2d_fixed(Tensor(m), ident).data, m)
    assert np.allclose(T.conv2d_fixed(Tensor(m), sobel).data[0, 0], brute_correlate(m[0, 0], sobel), atol=1e-14)


def test_conv2d_fixed_rejects_even_kernel():
    with pytest.raises(ValueError):
        T.conv2d_fixed(Tensor(np.zeros((1, 1, 4, 4))), np.ones((2, 3)))


def test_conv2d_matches_per_channel_correlation():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    for n in range(2):
        for o in range(4):
            expect = sum(brute_correlate(x[n, i], w[o, i]) for i in range(3)) + b[o]
            assert np.allclose(out[n, o], expect, atol=1e-12)


def test_sliding_max_min_replicate_edges():
    m = np.zeros((1, 1, 5, 5))
    m[0, 0, 0, 0] = 1.0
    dil = T.sliding_max(Tensor(m), 3).data[0, 0]
    assert dil[:2, :2].min() == 1.0 and dil.sum() == 4.0
    assert T.sliding_min(Tensor(m), 3).data.max() == 0.0


# -- elementwise, reductions, linear ---------------------------------------------


def test_elementwise_examples():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert np.array_equal(T.elementwise("mul", Tensor(a), Tensor(np.zeros((3, 4)))).data, np.zeros((3, 4)))
    assert np.array_equal(T.elementwise("sub", Tensor(a), Tensor(a)).data, np.zeros((3, 4)))
    prod = T.elementwise("mul", Tensor(a), Tensor(b)).data
    for i in range(3):
        for j in range(4):
            assert prod[i, j] == a[i, j] * b[i, j]


def test_elementwise_shape_mismatch():
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        T.elementwise("pow", Tensor(np.zeros(3)), Tensor(np.zeros(3)))


def test_reduce_sum_examples():
    assert T.reduce_sum(Tensor(np.ones((3, 3)))).item() == 9.0
    assert T.reduce_sum(Tensor(np.zeros((2, 2)))).item() == 0.0
    x = np.random.default_rng(6).normal(size=1000) * 1e3
    assert T.reduce_sum(Tensor(x)).item() == pytest.approx(math.fsum(x), rel=1e-12)
    with pytest.raises(ValueError):
        T.reduce_sum(Tensor(np.ones((2, 2))), 5)


def test_linear_and_relu():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4))
    assert np.allclose(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    assert np.array_equal(T.relu(Tensor(-np.abs(x) - 1)).data, np.zeros((3, 4)))
    w, b = rng.normal(size=(4, 2)), rng.normal(size=2)
    out = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    for i in range(3):
        for j in range(2):
            assert out[i, j] == pytest.approx(sum(x[i, k] * w[k, j] for k in range(4)) + b[j], abs=1e-12)
    with pytest.raises(ValueError):
        T.linear(Tensor(x), Tensor(np.zeros((3, 2))))


def test_softmax_examples():
    p, logp = T.softmax_log(Tensor(np.zeros((2, 4))), axis=1)
    assert np.allclose(p.data, 0.25)
    p, _ = T.softmax_log(Tensor(np.array([[1000.0, 0.0]])), axis=1)
    assert np.isfinite(p.data).all() and p.data[0, 0] == pytest.approx(1.0) and p.data[0, 1] < 1e-300
    x = np.random.default_rng(8).normal(size=(5, 6)) * 5
    p, logp = T.softmax_log(Tensor(x), axis=1)
    ref = np.exp(x.astype(np.longdouble))
    ref = ref / ref.sum(axis=1, keepdims=True)
    assert np.allclose(p.data, ref.astype(np.float64), rtol=1e-13, atol=0)
    assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.exp(logp.data), p.data)


# -- graph and gradients -----------------------------------------------------------


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    assert np.array_equal(T.backward(T.reduce_sum(x))[x], [1.0, 1.0, 1.0])
    assert np.array_equal(T.backward(T.reduce_sum(x * x))[x], [2.0, 4.0, 6.0])
    with pytest.raises(ValueError):
        T.backward(x * x)


def test_stop_gradient_contract():
    x = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    sg = T.stop_gradient(x)
    assert np.array_equal(sg.data, x.data)
    assert np.array_equal(T.backward(T.reduce_sum(sg))[x], np.zeros(3))
    assert np.array_equal(T.backward(T.reduce_sum(x * T.stop_gradient(x)))[x], x.data)


def test_non_participating_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    grads = T.backward(T.reduce_sum(x * x))
    assert np.array_equal(grads[y], np.zeros(3))


def test_graph_visits_each_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    a = x * x
    b = a + a  # diamond: a has two consumers
    loss = T.reduce_sum(b * a)
    nodes = T.Graph.trace(loss).nodes
    assert len(nodes) == len({id(n) for n in nodes})
    # loss = 2 x^4 -> 8 x^3
    assert T.backward(loss)[x][0] == pytest.approx(64.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


def test_tensors_are_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_grad_check_examples():
    x = np.random.default_rng(9).normal(size=5)
    assert T.grad_check(lambda t: T.reduce_sum(t), x) < 1e-10
    assert T.grad_check(lambda t: T.reduce_sum(t * t), np.array([1.0, 2.0]), 1e-4) < 1e-7
    with pytest.raises(ValueError):
        T.grad_check(lambda t: t * t, x)
    with pytest.raises(ValueError):
        T.grad_check(lambda t: T.reduce_sum(t), x, h=0.0)


def test_grad_check_dbc_with_random_projection():
    from toposeg.boxcount import dbc_multiscale
    from toposeg.gradcheck import _distinct

    rng = np.random.default_rng(10)
    x = _distinct(rng, (1, 2, 8, 8))
    proj = Tensor(rng.normal(size=(1, 2, 3)))
    err = T.grad_check(lambda t: T.reduce_sum(dbc_multiscale(t, (1, 2, 4)) * proj), x)
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_softmax_rows_are_distributions(seed):
    x = np.random.default_rng(seed).normal(size=(4, 7)) * 30
    p, _ = T.softmax_log(Tensor(x), axis=1)
    assert np.all((p.data >= 0) & (p.data <= 1))
    assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-9)
