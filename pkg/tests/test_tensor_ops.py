import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iyolo import tensor_ops as ops
from iyolo.errors import ShapeError


def linear_conv(weights, bias=None):
    w = np.asarray(weights, dtype=np.float32)
    b = np.zeros(w.shape[0], np.float32) if bias is None else np.asarray(bias, np.float32)
    return ops.ConvParams(w, bias=b, activation="linear")


def bn_conv(rng, cin, cout, k, dtype=np.float64):
    w = rng.normal(size=(cout, cin, k, k)).astype(dtype)
    bn = ops.BatchNorm(rng.uniform(0.5, 1.5, cout).astype(dtype),
                       rng.uniform(-0.3, 0.3, cout).astype(dtype),
                       rng.uniform(-0.2, 0.2, cout).astype(dtype),
                       rng.uniform(0.5, 2.0, cout).astype(dtype))
    return ops.ConvParams(w, bn=bn, activation="leaky")


def naive_conv(x, w):
    """Direct zero-padded cross-correlation, one output element at a time."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for y in range(h):
            for xx in range(wd):
                acc = 0.0
                for ic in range(c):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - pad, xx + dx - pad
                            if 0 <= yy < h and 0 <= xs < wd:
                                acc += x[ic, yy, xs] * w[oc, ic, dy, dx]
                out[oc, y, xx] = acc
    return out


def central_diff(f, x, h=1e-3):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, n):
    a, n = np.ravel(a), np.ravel(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


# -- convolution -------------------------------------------------------------

def test_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    y = ops.conv2d(x, linear_conv(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y, x)


def test_all_ones_kernel_hand_values():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)
    y = ops.conv2d(x, linear_conv(np.ones((1, 1, 3, 3))))
    assert y[0, 1, 1] == 45.0
    assert y[0, 0, 0] == 12.0  # 1 + 2 + 4 + 5


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 6))
    w = rng.normal(size=(2, 3, 3, 3))
    y = ops.conv2d(x, ops.ConvParams(w, bias=np.zeros(2), activation="linear"))
    np.testing.assert_allclose(y, naive_conv(x, w), rtol=1e-12, atol=1e-12)


def test_conv_preserves_spatial_size_at_full_width():
    # 32 -> 64 channels at 416x416, the second conv of the full network
    rng = np.random.default_rng(1)
    x = rng.random((32, 416, 416), dtype=np.float32)
    w = rng.random((64, 32, 3, 3), dtype=np.float32) * 0.01
    y = ops.conv2d(x, linear_conv(w))
    assert y.shape == (64, 416, 416)
    assert y.dtype == np.float32


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((2, 4, 4), np.float32), linear_conv(np.ones((1, 3, 1, 1))))


def test_batchnorm_inference_form():
    rng = np.random.default_rng(2)
    p = bn_conv(rng, 2, 3, 1)
    p.activation = "linear"
    x = rng.normal(size=(2, 4, 4))
    z = np.einsum("oi,ihw->ohw", p.weights[:, :, 0, 0], x)
    bn = p.bn
    expect = (bn.gamma[:, None, None] * (z - bn.running_mean[:, None, None])
              / np.sqrt(bn.running_var[:, None, None] + 1e-5) + bn.beta[:, None, None])
    np.testing.assert_allclose(ops.conv2d(x, p), expect, rtol=1e-12)


def test_nonpositive_running_var_rejected():
    with pytest.raises(ValueError):
        ops.BatchNorm(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))


def test_conv_is_linear_without_bn():
    rng = np.random.default_rng(3)
    p = linear_conv(rng.normal(size=(4, 3, 3, 3)))
    x, y = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    a, b = 1.7, -0.4
    lhs = ops.conv2d(a * x + b * y, p).astype(np.float64)
    rhs = a * ops.conv2d(x, p).astype(np.float64) + b * ops.conv2d(y, p)
    assert np.max(np.abs(lhs - rhs)) <= 1e-4 * np.max(np.abs(rhs))


def test_batched_matches_single():
    rng = np.random.default_rng(4)
    p = bn_conv(rng, 3, 2, 3, dtype=np.float32)
    x = rng.random((3, 3, 6, 6), dtype=np.float32)
    batched = ops.conv2d(x, p)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], ops.conv2d(x[i], p))


# -- activations -------------------------------------------------------------

def test_leaky_relu_values():
    assert ops.leaky_relu(1.0) == 1.0
    assert ops.leaky_relu(-1.0) == pytest.approx(-0.1)
    assert ops.leaky_relu(-1) == pytest.approx(-0.1)


def test_sigmoid_values():
    assert ops.sigmoid(np.float32(0)) == 0.5
    lo = ops.sigmoid(np.float32(-1000))
    assert lo == 0.0 and lo.dtype == np.float32
    with np.errstate(over="raise", invalid="raise"):
        out = ops.sigmoid(np.array([-1e4, -50, 0, 50, 1e4], np.float32))
    assert np.all(np.isfinite(out))
    assert out[-1] == 1.0


# -- max-pool ----------------------------------------------------------------

def test_maxpool_examples():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    np.testing.assert_array_equal(ops.maxpool2(x), [[[4]]])
    const = np.full((2, 4, 6), 0.25, np.float32)
    np.testing.assert_array_equal(ops.maxpool2(const), np.full((2, 2, 3), 0.25))


def test_maxpool_full_width():
    y = ops.maxpool2(np.zeros((32, 416, 416), np.float32))
    assert y.shape == (32, 208, 208)


def test_maxpool_odd_rejected():
    with pytest.raises(ShapeError):
        ops.maxpool2(np.zeros((1, 3, 4), np.float32))


def test_maxpool_tie_routes_to_first_row_major():
    x = np.array([[[5, 5], [5, 5]]], np.float32)
    y, cache = ops.maxpool2_forward(x)
    g = ops.backward_maxpool2(np.ones_like(y), cache)
    np.testing.assert_array_equal(g, [[[1, 0], [0, 0]]])
    x = np.array([[[0, 7], [7, 1]]], np.float32)
    y, cache = ops.maxpool2_forward(x)
    np.testing.assert_array_equal(ops.backward_maxpool2(np.ones_like(y), cache),
                                  [[[0, 1], [0, 0]]])


# -- reorg / concat ----------------------------------------------------------

def test_reorg_hand_example():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    np.testing.assert_array_equal(ops.reorg(x).reshape(-1), [1, 2, 3, 4])


def test_reorg_index_mapping():
    rng = np.random.default_rng(5)
    c, h, w, s = 3, 6, 4, 2
    x = rng.normal(size=(c, h, w))
    y = ops.reorg(x, s)
    for ci in range(c):
        for dy in range(s):
            for dx in range(s):
                for yy in range(h // s):
                    for xx in range(w // s):
                        assert y[ci * s * s + dy * s + dx, yy, xx] == x[ci, s * yy + dy, s * xx + dx]


def test_reorg_full_width():
    x = np.random.default_rng(6).random((512, 26, 26), dtype=np.float32)
    y = ops.reorg(x)
    assert y.shape == (2048, 13, 13)
    np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
    np.testing.assert_array_equal(ops.reorg_inverse(y), x)


def test_reorg_indivisible():
    with pytest.raises(ShapeError):
        ops.reorg(np.zeros((1, 3, 4)))


def test_concat_examples():
    a = np.zeros((2048, 13, 13), np.float32)
    b = np.ones((1024, 13, 13), np.float32)
    assert ops.concat_channels(a, b).shape == (3072, 13, 13)
    x = np.random.default_rng(7).random((3, 4, 4))
    xx = ops.concat_channels(x, x)
    np.testing.assert_array_equal(xx[:3], x)
    np.testing.assert_array_equal(xx[3:], x)
    with pytest.raises(ShapeError):
        ops.concat_channels(x, np.zeros((0, 4, 4)))
    with pytest.raises(ShapeError):
        ops.concat_channels(x, np.zeros((1, 4, 5)))


# -- backward passes vs finite differences -----------------------------------

def test_conv_backward_identity_kernel():
    x = np.random.default_rng(8).normal(size=(1, 3, 3))
    p = ops.ConvParams(np.ones((1, 1, 1, 1)), bias=np.zeros(1), activation="linear")
    _, cache = ops.conv2d_forward(x, p)
    g = np.random.default_rng(9).normal(size=(1, 3, 3))
    gx, _ = ops.backward_conv2d(g, cache)
    np.testing.assert_array_equal(gx, g)


def test_conv_backward_2to3_finite_difference():
    rng = np.random.default_rng(10)
    p = ops.ConvParams(rng.normal(size=(3, 2, 3, 3)), bias=rng.normal(size=3),
                       activation="linear")
    x = rng.normal(size=(2, 4, 4))
    r = rng.normal(size=(3, 4, 4))
    f = lambda: float(np.sum(ops.conv2d(x, p) * r))
    _, cache = ops.conv2d_forward(x, p)
    gx, grads = ops.backward_conv2d(r, cache)
    assert max_rel_err(gx, central_diff(f, x)) <= 1e-3
    assert max_rel_err(grads["weights"], central_diff(f, p.weights)) <= 1e-3
    assert max_rel_err(grads["bias"], central_diff(f, p.bias)) <= 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_conv_bn_leaky_backward_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k = int(rng.choice([1, 3]))
    h, w = (int(v) for v in rng.integers(2, 9, size=2))
    p = bn_conv(rng, cin, cout, k)
    # redraw inputs until no pre-activation sits within reach of the leaky kink
    for _ in range(200):
        x = rng.normal(size=(cin, h, w))
        _, cache = ops.conv2d_forward(x, p)
        if np.min(np.abs(cache["pre"])) > 5e-2:
            break
    r = rng.normal(size=(cout, h, w))
    f = lambda: float(np.sum(ops.conv2d(x, p) * r))
    gx, grads = ops.backward_conv2d(r, cache)
    assert max_rel_err(gx, central_diff(f, x)) <= 1e-3
    assert max_rel_err(grads["weights"], central_diff(f, p.weights)) <= 1e-3
    assert max_rel_err(grads["gamma"], central_diff(f, p.bn.gamma)) <= 1e-3
    assert max_rel_err(grads["beta"], central_diff(f, p.bn.beta)) <= 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_pool_reorg_concat_backward_finite_difference(seed):
    rng = np.random.default_rng(200 + seed)
    c = int(rng.integers(1, 5))
    h, w = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))
    # distinct values spaced well beyond 2h so no window max changes hands
    x = (rng.permutation(c * h * w) * 0.05 - 1.0).reshape(c, h, w)

    r = rng.normal(size=(c, h // 2, w // 2))
    _, cache = ops.maxpool2_forward(x)
    g = ops.backward_maxpool2(r, cache)
    assert max_rel_err(g, central_diff(lambda: float(np.sum(ops.maxpool2(x) * r)), x)) <= 1e-3

    r = rng.normal(size=(4 * c, h // 2, w // 2))
    g = ops.backward_reorg(r)
    assert max_rel_err(g, central_diff(lambda: float(np.sum(ops.reorg(x) * r)), x)) <= 1e-3

    b = rng.normal(size=(2, h, w))
    r = rng.normal(size=(c + 2, h, w))
    ga, gb = ops.backward_concat_channels(r, c)
    f = lambda: float(np.sum(ops.concat_channels(x, b) * r))
    assert max_rel_err(ga, central_diff(f, x)) <= 1e-3
    assert max_rel_err(gb, central_diff(f, b)) <= 1e-3


def test_backward_shape_mismatch():
    x = np.zeros((1, 4, 4))
    _, cache = ops.maxpool2_forward(x)
    with pytest.raises(ShapeError):
        ops.backward_maxpool2(np.zeros((1, 3, 2)), cache)
    p = ops.ConvParams(np.ones((1, 1, 1, 1)), bias=np.zeros(1), activation="linear")
    _, cache = ops.conv2d_forward(x, p)
    with pytest.raises(ShapeError):
        ops.backward_conv2d(np.zeros((2, 4, 4)), cache)


# -- shape algebra properties ------------------------------------------------

dims = st.integers(1, 8)


@settings(max_examples=40, deadline=None)
@given(c=dims, o=dims, h=st.integers(1, 16), w=st.integers(1, 16), k=st.sampled_from([1, 3]))
def test_conv_shape_rule(c, o, h, w, k):
    p = linear_conv(np.ones((o, c, k, k)))
    assert ops.conv2d(np.zeros((c, h, w), np.float32), p).shape == (o, h, w)


@settings(max_examples=40, deadline=None)
@given(c=dims, h=st.integers(1, 8), w=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_maxpool_shape_and_dominance(c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(c, 2 * h, 2 * w)).astype(np.float32)
    y = ops.maxpool2(x)
    assert y.shape == (c, h, w)
    up = np.repeat(np.repeat(y, 2, axis=1), 2, axis=2)
    assert np.all(up >= x)


@settings(max_examples=40, deadline=None)
@given(c=dims, h=st.integers(1, 8), w=st.integers(1, 8), s=st.integers(1, 3),
       seed=st.integers(0, 2**16))
def test_reorg_shape_and_bijection(c, h, w, s, seed):
    x = np.random.default_rng(seed).normal(size=(c, s * h, s * w))
    y = ops.reorg(x, s)
    assert y.shape == (c * s * s, h, w)
    np.testing.assert_array_equal(ops.reorg_inverse(y, s), x)


@settings(max_examples=40, deadline=None)
@given(ca=dims, cb=dims, h=st.integers(1, 16), w=st.integers(1, 16))
def test_concat_shape_rule(ca, cb, h, w):
    out = ops.concat_channels(np.zeros((ca, h, w)), np.ones((cb, h, w)))
    assert out.shape == (ca + cb, h, w)
    assert out[:ca].sum() == 0 and out[ca:].sum() == cb * h * w


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, width=32), min_size=1, max_size=50))
def test_activations_finite(values):
    x = np.array(values, np.float32)
    s = ops.sigmoid(x)
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    assert np.all(np.isfinite(ops.leaky_relu(x)))
