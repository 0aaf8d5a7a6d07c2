"""Dense numpy layers with hand-written backward passes, plus Adam.

Arrays are NCHW.  Layers compute in the dtype of their parameters, so a model
cast to float64 doubles as its own finite-difference reference.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels

# Output planes at least this large use the direct loops in _kernels; smaller
# ones go through im2col + BLAS.
DIRECT_CONV_MIN_PIXELS = 16384


class ShapeMismatch(ValueError):
    pass


class GraphNotRecorded(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def check_finite(x, where=""):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced by {where or 'op'}")
    return x


class Layer:
    """Base layer.

    ``forward(x, training=True)`` records what ``backward`` needs; eval-mode
    forwards record nothing, so a model in eval use is never mutated.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise GraphNotRecorded(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        self.zero_grad()
        return self


# -- convolution ---------------------------------------------------------------

def _windows(xp, kh, kw, sh, sw, ho, wo):
    """Strided view (N, C, KH, KW, Ho, Wo) of a padded NCHW array."""
    n, c, _, _ = xp.shape
    s = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw),
        writeable=False,
    )


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, weight, bias, stride=1, pad=0):
    """Cross-correlation of an NCHW batch with (Cout, Cin, KH, KW) filters.

    Returns ``(out, cols)``; ``cols`` is the im2col matrix reused by the
    backward pass.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input, got shape {x.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeMismatch(f"input has {cin} channels, filters expect {wcin}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"{kh}x{kw} kernel does not fit padded input {h + 2 * ph}x{w + 2 * pw}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n, cin * kh * kw, ho * wo)
    w2 = weight.reshape(cout, -1)
    out = np.matmul(w2, cols)
    out += bias.reshape(1, cout, 1)
    return out.reshape(n, cout, ho, wo), cols


def conv2d_backward(dout, cols, x_shape, weight, stride=1, pad=0):
    """Gradients (dx, dweight, dbias) for :func:`conv2d`."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, cin, h, w = x_shape
    cout, _, kh, kw = weight.shape
    _, _, ho, wo = dout.shape
    d2 = dout.reshape(n, cout, ho * wo)
    dw = np.zeros((cout, cin * kh * kw), dtype=weight.dtype)
    for i in range(n):
        dw += d2[i] @ cols[i].T
    db = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(weight.dtype)
    dcols = np.matmul(weight.reshape(cout, -1).T, d2).reshape(n, cin, kh, kw, ho, wo)
    dxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=dout.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw] += dcols[:, :, a, b]
    dx = dxp[:, :, ph:ph + h, pw:pw + w]
    return dx, dw.reshape(weight.shape), db


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = _pair(kernel)
        self.stride, self.pad = stride, pad
        self.skip_input_grad = False
        self.path = "auto"   # or "direct" / "im2col"
        rng = np.random.default_rng() if rng is None else rng
        # Kaiming-uniform over fan-in (gain sqrt(2) for ReLU nets).
        bound = math.sqrt(6.0 / (in_ch * kh * kw))
        self.params["weight"] = rng.uniform(-bound, bound, (out_ch, in_ch, kh, kw)).astype(dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()

    def _direct(self, x):
        if _pair(self.stride) != (1, 1) or x.ndim != 4 or self.path == "im2col":
            return False
        if self.path == "direct":
            return True
        _, _, kh, kw = self.params["weight"].shape
        ph, pw = _pair(self.pad)
        ho, wo = x.shape[2] + 2 * ph - kh + 1, x.shape[3] + 2 * pw - kw + 1
        return ho * wo >= DIRECT_CONV_MIN_PIXELS

    def forward(self, x, training=False):
        w, b = self.params["weight"], self.params["bias"]
        if self._direct(x):
            if x.shape[1] != w.shape[1]:
                raise ShapeMismatch(f"input has {x.shape[1]} channels, filters expect {w.shape[1]}")
            ph, pw = _pair(self.pad)
            xp = np.pad(x.astype(w.dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            out = np.empty((x.shape[0], w.shape[0], xp.shape[2] - w.shape[2] + 1, xp.shape[3] - w.shape[3] + 1),
                           dtype=w.dtype)
            _kernels.conv_fwd(xp, w, b, out)
            if training:
                self._cache = ("direct", xp, x.shape)
            return out
        out, cols = conv2d(x, w, b, self.stride, self.pad)
        if training:
            self._cache = ("im2col", cols, x.shape)
        return out

    def backward(self, dout):
        kind, saved, x_shape = self._pop_cache()
        w = self.params["weight"]
        if kind == "direct":
            ph, pw = _pair(self.pad)
            want_dx = not self.skip_input_grad
            dxp = np.zeros_like(saved) if want_dx else np.zeros((1, 1, 1, 1), dtype=saved.dtype)
            dw = np.zeros(w.shape, dtype=np.float64)
            db = np.zeros(w.shape[0], dtype=np.float64)
            _kernels.conv_bwd(saved, w, np.ascontiguousarray(dout, dtype=w.dtype), dxp, dw, db, want_dx)
            dx = dxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]] if want_dx else None
        else:
            dx, dw, db = conv2d_backward(dout, saved, x_shape, w, self.stride, self.pad)
        self.grads["weight"] += dw.astype(w.dtype, copy=False)
        self.grads["bias"] += db.astype(w.dtype, copy=False)
        return dx


# -- batch norm ----------------------------------------------------------------

class BatchNorm2d(Layer):
    """Per-channel batch norm over (N, H, W); running stats use unbiased variance."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x, training=False):
        c = self.params["gamma"].shape[0]
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeMismatch(f"batchnorm over {c} channels got input {x.shape}")
        dtype = self.params["gamma"].dtype
        if not training:
            scale = self.params["gamma"] / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
            shift = self.params["beta"] - self.buffers["running_mean"] * scale
            x = np.ascontiguousarray(x, dtype=dtype)
            out = np.empty_like(x)
            _kernels.channel_affine(x, scale.astype(dtype), shift.astype(dtype), out)
            return out
        x = np.ascontiguousarray(x, dtype=dtype)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        s1, s2 = _kernels.channel_moments(x)
        mean = s1 / m
        var = np.maximum(s2 / m - mean * mean, 0.0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = np.empty_like(x)
        _kernels.channel_affine(x, inv_std.astype(dtype), (-mean * inv_std).astype(dtype), xhat)
        out = np.empty_like(x)
        _kernels.channel_affine(xhat, self.params["gamma"], self.params["beta"], out)
        mom = self.momentum
        unbiased = var * m / max(m - 1, 1)
        self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"] + mom * mean).astype(dtype)
        self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"] + mom * unbiased).astype(dtype)
        self._cache = (xhat, inv_std, m)
        return out

    def backward(self, dout):
        xhat, inv_std, m = self._pop_cache()
        dtype = xhat.dtype
        dout = np.ascontiguousarray(dout, dtype=dtype)
        dbeta, dgamma = _kernels.channel_dot(dout, xhat)
        self.grads["gamma"] += dgamma.astype(dtype)
        self.grads["beta"] += dbeta.astype(dtype)
        k = self.params["gamma"].astype(np.float64) * inv_std
        dx = np.empty_like(dout)
        _kernels.channel_affine2(dout, xhat, k.astype(dtype), (-k * dgamma / m).astype(dtype),
                                 (-k * dbeta / m).astype(dtype), dx)
        return dx


def batchnorm(x, gamma, beta, running_mean, running_var, mode="eval", momentum=0.1, eps=1e-5):
    """Functional batch norm; returns ``(out, new_running_mean, new_running_var)``."""
    bn = BatchNorm2d(len(gamma), momentum=momentum, eps=eps, dtype=x.dtype)
    bn.params["gamma"] = np.asarray(gamma, dtype=x.dtype)
    bn.params["beta"] = np.asarray(beta, dtype=x.dtype)
    bn.buffers["running_mean"] = np.asarray(running_mean, dtype=x.dtype)
    bn.buffers["running_var"] = np.asarray(running_var, dtype=x.dtype)
    out = bn.forward(x, training=(mode == "train"))
    return out, bn.buffers["running_mean"], bn.buffers["running_var"]


# -- elementwise ----------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class ReLU(Layer):
    def forward(self, x, training=False):
        mask = x > 0
        if training:
            self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._pop_cache()


class Sigmoid(Layer):
    def forward(self, x, training=False):
        y = sigmoid(x)
        if training:
            self._cache = y
        return y

    def backward(self, dout):
        y = self._pop_cache()
        return dout * y * (1 - y)


# -- pooling --------------------------------------------------------------------

def pool2d(x, kind="max", size=2, stride=None):
    out, _ = _pool_forward(x, kind, _pair(size), _pair(stride if stride is not None else size))
    return out


def _pool_forward(x, kind, size, stride):
    if x.ndim != 4:
        raise ShapeMismatch(f"pool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    (kh, kw), (sh, sw) = size, stride
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"{kh}x{kw} pool does not fit input {h}x{w}")
    s = x.strides
    win = as_strided(x, (n, c, ho, wo, kh, kw), (s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
                     writeable=False).reshape(n, c, ho, wo, kh * kw)
    if kind == "max":
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, idx
    if kind == "avg":
        return win.mean(axis=-1, dtype=np.float64).astype(x.dtype), None
    raise ValueError(f"unknown pool kind {kind!r}")


class Pool2d(Layer):
    def __init__(self, kind="max", size=2, stride=None):
        super().__init__()
        self.kind = kind
        self.size = _pair(size)
        self.stride = _pair(stride if stride is not None else size)

    def _direct(self):
        return self.kind == "max" and self.size == self.stride

    def forward(self, x, training=False):
        if self._direct() and x.ndim == 4:
            (kh, kw) = self.size
            n, c, h, w = x.shape
            if h < kh or w < kw:
                raise ShapeMismatch(f"{kh}x{kw} pool does not fit input {h}x{w}")
            out = np.empty((n, c, h // kh, w // kw), dtype=x.dtype)
            arg = np.empty(out.shape, dtype=np.int32)
            _kernels.maxpool_fwd(x, kh, kw, out, arg)
            if training:
                self._cache = (x.shape, arg)
            return out
        out, idx = _pool_forward(x, self.kind, self.size, self.stride)
        if training:
            self._cache = (x.shape, idx)
        return out

    def backward(self, dout):
        x_shape, idx = self._pop_cache()
        if self._direct():
            dx = np.zeros(x_shape, dtype=dout.dtype)
            _kernels.maxpool_bwd(np.ascontiguousarray(dout), idx, self.size[0], self.size[1], dx)
            return dx
        (kh, kw), (sh, sw) = self.size, self.stride
        n, c, ho, wo = dout.shape
        if self.kind == "max":
            dwin = np.zeros((n, c, ho, wo, kh * kw), dtype=dout.dtype)
            np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
            dwin = dwin.reshape(n, c, ho, wo, kh, kw)
        else:
            dwin = np.broadcast_to((dout / (kh * kw))[..., None, None], (n, c, ho, wo, kh, kw))
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for a in range(kh):
            for b in range(kw):
                dx[:, :, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw] += dwin[..., a, b]
        return dx


def global_avg_pool(x):
    """Mean over the segment axis of an (N, C, K, 1) tensor -> (N, C)."""
    if x.ndim != 4 or x.shape[3] != 1:
        raise ShapeMismatch(f"global_avg_pool expects (N, C, K, 1), got {x.shape}")
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


class SegmentPool(Layer):
    """Recording-level pooling of segment outputs: (N, C, K, 1) -> (N, C)."""

    def __init__(self, kind="mean"):
        super().__init__()
        if kind not in ("mean", "max"):
            raise ValueError(f"unknown recording pool {kind!r}")
        self.kind = kind

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != 1:
            raise ShapeMismatch(f"segment pooling expects (N, C, K, 1), got {x.shape}")
        seg = x[..., 0]
        if self.kind == "mean":
            if training:
                self._cache = (x.shape, None)
            return global_avg_pool(x)
        idx = seg.argmax(axis=2)
        if training:
            self._cache = (x.shape, idx)
        return np.take_along_axis(seg, idx[..., None], axis=2)[..., 0]

    def backward(self, dout):
        shape, idx = self._pop_cache()
        n, c, k, _ = shape
        if self.kind == "mean":
            return np.broadcast_to((dout / k)[:, :, None, None], shape).copy()
        dx = np.zeros((n, c, k), dtype=dout.dtype)
        np.put_along_axis(dx, idx[..., None], dout[..., None], axis=2)
        return dx[..., None]


# -- optimiser ------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of every array in ``params``."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params, grads):
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
