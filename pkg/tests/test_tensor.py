"""Forward semantics of the tensor primitives."""

import math

import numpy as np
import pytest

from streamadapt import tensor as T


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype("float64"):
        yield


def test_softmax_uniform_logits():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(6, 9)) * 30)
    out = T.softmax(x, axis=1)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.isfinite(out.data).all()


def test_cross_entropy_uniform_is_log_c():
    for c in (2, 4, 10):
        logits = T.Tensor(np.zeros((3, c)))
        loss = T.cross_entropy(logits, np.zeros(3, dtype=int))
        assert abs(loss.item() - math.log(c)) < 1e-12


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="label out of range"):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_matmul_shape_error_names_op():
    a, b = T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(a, b)


def test_conv2d_channel_mismatch():
    x = T.Tensor(np.zeros((1, 3, 8, 8)))
    w = T.Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(x, w, T.Tensor(np.zeros(4)))


def test_conv2d_same_padding_preserves_spatial():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(size=(2, 3, 8, 8)))
    w = T.Tensor(rng.normal(size=(5, 3, 5, 5)))
    out = T.conv2d(x, w, T.Tensor(np.zeros(5)), padding="same")
    assert out.shape == (2, 5, 8, 8)


def test_conv2d_matches_direct_convolution():
    # oracle: naive loop convolution
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding="same").data

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 6, 6))
    for n in range(2):
        for f in range(3):
            for i in range(6):
                for j in range(6):
                    ref[n, f, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[f]) + b[f]
    assert np.allclose(out, ref, atol=1e-10)


def test_max_pool_values_and_tie_break():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0] = [[1.0, 1.0], [0.0, 1.0]]  # tie between three maxima
    t = T.Tensor(x, requires_grad=True)
    out = T.max_pool2d(t, 2)
    assert out.data.item() == 1.0
    T.backward(out.sum())
    # gradient routes to the lowest window offset only
    assert t.grad.data[0, 0, 0, 0] == 1.0
    assert t.grad.data.sum() == 1.0


def test_group_norm_standardizes_groups():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.normal(loc=3.0, scale=2.5, size=(4, 8, 5, 5)))
    ones, zeros = T.Tensor(np.ones(8)), T.Tensor(np.zeros(8))
    out = T.group_norm(x, ones, zeros, num_groups=2).data
    grouped = out.reshape(4, 2, -1)
    assert np.abs(grouped.mean(axis=2)).max() <= 1e-5
    assert np.abs(grouped.var(axis=2) - 1.0).max() <= 1e-4


def test_group_norm_constant_group_is_zero():
    x = T.Tensor(np.full((2, 4, 3, 3), 7.0))
    out = T.group_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), num_groups=2)
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_group_norm_rejects_indivisible_channels():
    x = T.Tensor(np.zeros((1, 6, 2, 2)))
    with pytest.raises(T.ShapeError, match="group_norm"):
        T.group_norm(x, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)), num_groups=4)


def test_group_norm_matches_reference_backward():
    # oracle: hand-derived GroupNorm gradient
    rng = np.random.default_rng(4)
    n, c, h, w, groups = 2, 4, 3, 3, 2
    x = rng.normal(size=(n, c, h, w))
    gamma = rng.normal(size=c)
    beta = rng.normal(size=c)
    gy = rng.normal(size=(n, c, h, w))

    xt = T.Tensor(x, requires_grad=True)
    gt = T.Tensor(gamma, requires_grad=True)
    bt = T.Tensor(beta, requires_grad=True)
    out = T.group_norm(xt, gt, bt, num_groups=groups)
    T.backward(T.tsum(out * T.Tensor(gy)))

    eps = 1e-5
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = ((xg - mu) * inv).reshape(n, c, h, w)
    ggamma = (gy * xn).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxn = (gy * gamma[None, :, None, None]).reshape(n, groups, -1)
    xng = xn.reshape(n, groups, -1)
    gx = inv * (gxn - gxn.mean(axis=2, keepdims=True) - xng * (gxn * xng).mean(axis=2, keepdims=True))
    gx = gx.reshape(n, c, h, w)

    assert np.allclose(xt.grad.data, gx, atol=1e-9)
    assert np.allclose(gt.grad.data, ggamma, atol=1e-9)
    assert np.allclose(bt.grad.data, gbeta, atol=1e-9)


def test_rotate90_roundtrip_and_identity():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.normal(size=(2, 3, 6, 6)))
    assert T.rotate90(x, 0) is x
    full = T.rotate90(T.rotate90(x, 1), 3)
    assert np.array_equal(full.data, x.data)
    assert np.array_equal(T.rotate90(x, 4).data, x.data)


def test_rotate90_requires_square():
    x = T.Tensor(np.zeros((1, 1, 4, 6)))
    with pytest.raises(T.ShapeError, match="square"):
        T.rotate90(x, 1)


def test_unfold_fold_adjoint():
    # <unfold(x), y> == <x, fold(y)> for random x, y (linear adjoint pair)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 8, 8))
    ux = T.unfold2d(T.Tensor(x), 3, 3, stride=1, pad=1)
    y = rng.normal(size=ux.shape)
    fy = T.fold2d(T.Tensor(y), x.shape, 3, 3, stride=1, pad=1)
    assert abs(np.sum(ux.data * y) - np.sum(x * fy.data)) < 1e-8


def test_backward_requires_scalar():
    x = T.Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(T.GraphError, match="scalar"):
        T.backward(x + x)


def test_backward_twice_without_reforward_raises():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(x * x)
    T.backward(loss)
    with pytest.raises(T.GraphError, match="freed"):
        T.backward(loss)


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 4, 8, 8))
    w = rng.normal(size=(4, 4, 3, 3))

    def run():
        t = T.Tensor(x.copy(), requires_grad=True)
        wt = T.Tensor(w.copy(), requires_grad=True)
        out = T.max_pool2d(T.relu(T.conv2d(t, wt, T.Tensor(np.zeros(4)), padding="same")), 2)
        loss = T.tsum(out * out)
        T.backward(loss)
        return out.data.copy(), wt.grad.data.copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(g1, g2)


def test_float32_default_and_float64_mode():
    with T.default_dtype("float32"):
        assert T.Tensor([1.0]).data.dtype == np.float32
    assert T.Tensor([1.0]).data.dtype == np.float64  # fixture scope
