import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secost import nn, verify


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, c * stride:c * stride + kw]
                    out[i, o, r, c] = (patch * w[o]).sum() + b[o]
    return out


# -- conv -----------------------------------------------------------------------------

def test_conv_ones_counts_overlap():
    out, _ = nn.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out[0, 0], expected)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 6))
    out, _ = nn.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_conv_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 9), rng.integers(3, 9)
    kh, kw = rng.integers(1, 4), rng.integers(1, 4)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    wt = rng.standard_normal((cout, cin, kh, kw)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    out, _ = nn.conv2d(x, wt, b, stride, pad)
    np.testing.assert_allclose(out, naive_conv(x, wt, b, stride, pad), atol=1e-5, rtol=0)


@pytest.mark.parametrize("shape", [(2, 3, 9, 7), (1, 8, 130, 130)])
def test_direct_kernel_matches_im2col(shape):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape).astype(np.float32)
    a = nn.Conv2d(shape[1], 4, 3, 1, 1, rng=np.random.default_rng(2))
    b = nn.Conv2d(shape[1], 4, 3, 1, 1, rng=np.random.default_rng(2))
    a.path, b.path = "direct", "im2col"
    ya, yb = a.forward(x, training=True), b.forward(x, training=True)
    np.testing.assert_allclose(ya, yb, atol=1e-4, rtol=1e-5)
    g = rng.standard_normal(ya.shape).astype(np.float32)
    np.testing.assert_allclose(a.backward(g), b.backward(g), atol=1e-4, rtol=1e-5)
    for k in ("weight", "bias"):
        np.testing.assert_allclose(a.grads[k], b.grads[k], atol=2e-3, rtol=1e-4)


def test_auto_path_uses_direct_kernel_only_for_large_planes():
    conv = nn.Conv2d(1, 2, 3, 1, 1)
    assert conv._direct(np.zeros((1, 1, 128, 128)))
    assert not conv._direct(np.zeros((1, 1, 64, 64)))


def test_b1_conv_shape():
    conv = nn.Conv2d(1, 64, 3, 1, 1, rng=np.random.default_rng(0))
    assert conv.forward(np.zeros((1, 1, 1024, 64), np.float32)).shape == (1, 64, 1024, 64)


def test_conv_shape_errors():
    with pytest.raises(nn.ShapeMismatch):
        nn.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(nn.ShapeMismatch):
        nn.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_kaiming_uniform_bounds():
    conv = nn.Conv2d(8, 16, 3, rng=np.random.default_rng(0))
    bound = math.sqrt(6 / 72)
    assert np.abs(conv.params["weight"]).max() <= bound
    assert not conv.params["bias"].any()


# -- pooling -------------------------------------------------------------------------------

def test_max_and_avg_pool_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert nn.pool2d(x, "max", 2).item() == 4
    assert nn.pool2d(x, "avg", 2).item() == 2.5


def test_b1_pool_shape():
    out = nn.Pool2d("max", 4).forward(np.zeros((1, 64, 1024, 64), np.float32))
    assert out.shape == (1, 64, 256, 16)


def test_pool_kernel_path_matches_window_path():
    x = np.random.default_rng(3).standard_normal((2, 3, 16, 12)).astype(np.float32)
    layer = nn.Pool2d("max", 4)
    out = layer.forward(x, training=True)
    np.testing.assert_array_equal(out, nn.pool2d(x, "max", 4))
    g = np.random.default_rng(4).standard_normal(out.shape).astype(np.float32)
    dx = layer.backward(g)
    assert dx.sum() == pytest.approx(g.sum(), rel=1e-5)
    assert (dx != 0).sum() == g.size


def test_pool_does_not_fit():
    with pytest.raises(nn.ShapeMismatch):
        nn.Pool2d("max", 4).forward(np.zeros((1, 1, 3, 8)))


def test_global_avg_pool():
    np.testing.assert_allclose(nn.global_avg_pool(np.array([0.2, 0.4, 0.6]).reshape(1, 1, 3, 1)), [[0.4]])
    x = np.random.default_rng(0).random((2, 3, 1, 1))
    np.testing.assert_array_equal(nn.global_avg_pool(x), x[:, :, 0, 0])
    np.testing.assert_allclose(nn.global_avg_pool(np.full((1, 2, 30, 1), 0.9)), 0.9)
    with pytest.raises(nn.ShapeMismatch):
        nn.global_avg_pool(np.zeros((1, 2, 3, 2)))


def test_segment_mean_backward_distributes_evenly():
    layer = nn.SegmentPool("mean")
    layer.forward(np.zeros((1, 2, 5, 1)), training=True)
    dx = layer.backward(np.array([[1.0, 10.0]]))
    np.testing.assert_allclose(dx[0, :, :, 0], [[0.2] * 5, [2.0] * 5])


def test_segment_pool_is_permutation_invariant_under_mean():
    x = np.random.default_rng(5).random((2, 3, 7, 1))
    perm = np.random.default_rng(6).permutation(7)
    layer = nn.SegmentPool("mean")
    np.testing.assert_allclose(layer.forward(x), layer.forward(x[:, :, perm]))


# -- batch norm -------------------------------------------------------------------------------

def test_batchnorm_eval_identity():
    bn = nn.BatchNorm2d(3, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(bn.forward(x), x / math.sqrt(1 + 1e-5))


def test_batchnorm_train_unit_variance():
    bn = nn.BatchNorm2d(2, dtype=np.float64)
    x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1).repeat(2, axis=1)
    out = bn.forward(x, training=True)
    np.testing.assert_allclose(out[:, 0, 0, 0], [-1, 1], atol=1e-4)
    # running stats move by momentum 0.1 towards (mean 0, unbiased var 2)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * 2)


def test_batchnorm_gamma_zero_gives_beta():
    bn = nn.BatchNorm2d(1, dtype=np.float64)
    bn.params["gamma"][:] = 0
    bn.params["beta"][:] = 5
    x = np.random.default_rng(1).standard_normal((3, 1, 4, 4))
    np.testing.assert_allclose(bn.forward(x, training=True), 5)
    np.testing.assert_allclose(bn.forward(x), 5)


def test_batchnorm_eval_is_affine():
    bn = nn.BatchNorm2d(2, dtype=np.float64)
    bn.buffers["running_mean"][:] = [0.5, -1]
    bn.buffers["running_var"][:] = [2, 0.5]
    bn.params["gamma"][:] = [1.5, -0.3]
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 1, 2, 3, 3))
    f0 = bn.forward(np.zeros_like(a))
    lhs = bn.forward(a + 2 * b) - f0
    rhs = (bn.forward(a) - f0) + 2 * (bn.forward(b) - f0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_functional_batchnorm_matches_layer():
    x = np.random.default_rng(3).standard_normal((4, 2, 3, 3))
    out, rm, rv = nn.batchnorm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), mode="train")
    bn = nn.BatchNorm2d(2, dtype=np.float64)
    np.testing.assert_allclose(out, bn.forward(x, training=True), atol=1e-10)
    np.testing.assert_allclose(rm, bn.buffers["running_mean"])
    np.testing.assert_allclose(rv, bn.buffers["running_var"])


def test_batchnorm_channel_mismatch():
    with pytest.raises(nn.ShapeMismatch):
        nn.BatchNorm2d(3).forward(np.zeros((1, 2, 2, 2), np.float32))


# -- activations -------------------------------------------------------------------------------

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(nn.relu(np.array([-2.0, 3.0])), [0, 3])
    assert nn.sigmoid(np.array(0.0)) == 0.5
    assert nn.sigmoid(np.array(math.log(3))) == pytest.approx(0.75)
    big = nn.sigmoid(np.array([-800.0, 800.0]))
    assert np.isfinite(big).all() and big[1] == 1


def test_relu_gradient_zero_for_negative_inputs():
    layer = nn.ReLU()
    layer.forward(np.array([-1.0, 2.0, -3.0]), training=True)
    np.testing.assert_array_equal(layer.backward(np.ones(3)), [0, 1, 0])


# -- backward plumbing ---------------------------------------------------------------------------

def test_backward_without_forward_raises():
    for layer in (nn.Conv2d(1, 1, 3), nn.BatchNorm2d(1), nn.ReLU(), nn.Pool2d(), nn.SegmentPool()):
        with pytest.raises(nn.GraphNotRecorded):
            layer.backward(np.zeros((1, 1, 2, 2)))


def test_eval_forward_records_nothing():
    conv = nn.Conv2d(1, 1, 3, pad=1)
    conv.forward(np.zeros((1, 1, 4, 4), np.float32))
    with pytest.raises(nn.GraphNotRecorded):
        conv.backward(np.zeros((1, 1, 4, 4), np.float32))


def test_forward_is_deterministic():
    conv = nn.Conv2d(2, 3, 3, pad=1, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 2, 8, 8)).astype(np.float32)
    assert conv.forward(x).tobytes() == conv.forward(x).tobytes()


def test_check_finite():
    with pytest.raises(nn.NonFiniteError):
        nn.check_finite(np.array([1.0, np.nan]))


@pytest.mark.parametrize("seed", range(5))
def test_every_layer_gradient(seed):
    rng = np.random.default_rng(seed)
    for name, layer, x in verify.layer_cases(rng):
        errs = verify.gradcheck_layer(layer, x, rng)
        assert max(errs.values()) < 1e-3, (name, errs)


def test_mini_network_gradient():
    res = verify.gradcheck_network(0)
    assert res.skipped == 0
    assert max(res.errors.values()) < 1e-3


# -- Adam ------------------------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    nn.adam_step(p, {"w": np.zeros(2)}, nn.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1, -2])


def test_adam_first_step():
    p = {"w": np.array([1.0])}
    nn.adam_step(p, {"w": np.array([1.0])}, nn.AdamState(), lr=0.1)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_two_step_trace():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = {"w": np.array([0.5])}
    state = nn.AdamState()
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate((0.3, -0.7), start=1):
        nn.adam_step(p, {"w": np.array([g])}, state, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert p["w"][0] == pytest.approx(w, abs=1e-15)
    assert state.t == 2


def test_adam_shape_mismatch():
    with pytest.raises(nn.ShapeMismatch):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())
