"""Convolution, transposed convolution, batch norm and LeakyReLU with hand-written backward passes.

Tensors are float64 numpy arrays shaped (batch, channels, height, width).
Convolution weights are (out, in, k, k); transposed-convolution weights are
(in, out, k, k), the same array a tied forward convolution would use.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from desmoke.errors import ArgumentError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _windows(x, k, stride, pad):
    """(N, C, Ho, Wo, k, k) view of the zero-padded input's receptive fields."""
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for a {k}x{k} kernel")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :ho, :wo]


def _scatter_windows(cols, shape, k, stride, pad):
    """Adjoint of ``_windows``: sum (N, C, Ho, Wo, k, k) patches back into an (N, C, H, W) image."""
    n, c, h, w = shape
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    return out[:, :, pad:pad + h, pad:pad + w]


def _check_conv(x, w, in_axis):
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"expected square 4-D weights, got shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {w.shape[in_axis]}")


def conv2d(x, w, b=None, stride=1, pad=1):
    _check_conv(x, w, 1)
    win = _windows(x, w.shape[2], stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, dout, stride=1, pad=1):
    """Gradients (dx, dw, db) of a conv2d given the upstream gradient."""
    k = w.shape[2]
    win = _windows(x, k, stride, pad)
    if dout.shape[2:] != win.shape[2:4] or dout.shape[1] != w.shape[0]:
        raise ShapeError(f"upstream gradient {dout.shape} does not match conv output")
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    cols = np.tensordot(dout, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    dx = _scatter_windows(cols, x.shape, k, stride, pad)
    return dx, dw, db


def deconv_out_size(n, k=4, stride=2, pad=1):
    return (n - 1) * stride - 2 * pad + k


def deconv2d(x, w, b=None, stride=2, pad=1):
    """Transposed convolution: the adjoint of conv2d with the same weights."""
    _check_conv(x, w, 0)
    k = w.shape[2]
    n, _, h, wd = x.shape
    shape = (n, w.shape[1], deconv_out_size(h, k, stride, pad), deconv_out_size(wd, k, stride, pad))
    cols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _scatter_windows(cols, shape, k, stride, pad)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def deconv2d_backward(x, w, dout, stride=2, pad=1):
    k = w.shape[2]
    dx = conv2d(dout, w, None, stride, pad)
    if dx.shape != x.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match deconv output")
    win = _windows(dout, k, stride, pad)
    dw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def batchnorm(x, gamma, beta, mode="train", running=None, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    Returns ``(out, cache)``. In train mode ``running`` (a dict with ``mean``
    and ``var``) is updated in place with the unbiased batch variance.
    """
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ArgumentError("batchnorm needs at least 2 values per channel in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running is not None:
            running["mean"] = (1 - momentum) * running["mean"] + momentum * mean
            running["var"] = (1 - momentum) * running["var"] + momentum * var * count / (count - 1)
    elif mode == "eval":
        mean, var = running["mean"], running["var"]
    else:
        raise ArgumentError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, mode)


def batchnorm_backward(dout, gamma, cache):
    xhat, inv_std, mode = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (
        inv_std[None, :, None, None]
        / m
        * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
    )
    return dx, dgamma, dbeta


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x, dout, slope=LEAKY_SLOPE):
    # gradient at exactly 0 takes the x >= 0 branch
    return dout * np.where(x >= 0, 1.0, slope)


class Layer:
    """A differentiable block holding parameters, their gradients and the forward cache."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g


class Conv2d(Layer):
    def __init__(self, cin, cout, k=3, stride=1, pad=1, rng=None, init_std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        self.params["weight"] = rng.normal(0.0, init_std, size=(cout, cin, k, k))
        self.params["bias"] = np.zeros(cout)

    def forward(self, x, train=True):
        self._x = x
        return conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.pad)

    def backward(self, dout):
        dx, dw, db = conv2d_backward(self._x, self.params["weight"], dout, self.stride, self.pad)
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class Deconv2d(Layer):
    def __init__(self, cin, cout, k=4, stride=2, pad=1, rng=None, init_std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        self.params["weight"] = rng.normal(0.0, init_std, size=(cin, cout, k, k))
        self.params["bias"] = np.zeros(cout)

    def forward(self, x, train=True):
        self._x = x
        return deconv2d(x, self.params["weight"], self.params["bias"], self.stride, self.pad)

    def backward(self, dout):
        dx, dw, db = deconv2d_backward(self._x, self.params["weight"], dout, self.stride, self.pad)
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class BatchNorm2d(Layer):
    def __init__(self, channels, rng=None, init_std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["gamma"] = rng.normal(1.0, init_std, size=channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["mean"] = np.zeros(channels)
        self.buffers["var"] = np.ones(channels)

    def forward(self, x, train=True):
        out, self._cache = batchnorm(
            x, self.params["gamma"], self.params["beta"], "train" if train else "eval", self.buffers
        )
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = batchnorm_backward(dout, self.params["gamma"], self._cache)
        self._accumulate("gamma", dgamma)
        self._accumulate("beta", dbeta)
        return dx


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, dout):
        return leaky_relu_backward(self._x, dout, self.slope)


class TanhOut(Layer):
    """tanh rescaled to [0, 1]: (tanh(x) + 1) / 2."""

    def forward(self, x, train=True):
        self._y = np.tanh(x)
        return 0.5 * (self._y + 1.0)

    def backward(self, dout):
        return dout * 0.5 * (1.0 - self._y**2)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()
