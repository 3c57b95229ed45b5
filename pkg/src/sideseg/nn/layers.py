"""Differentiable layer kernels on channel-last feature maps.

Feature maps are numpy arrays of shape (h, w, c); dense vectors are
(..., features). Every layer exposes ``forward(x, train=False)`` returning
``(y, cache)`` and a matching ``backward(grad_out, cache)`` that accumulates
parameter gradients and returns the gradient w.r.t. the input. Caches are
plain tuples owned by the caller, so a model can hold one cache per sample
of a batch. Eval-mode forwards build no cache and mutate no state (batch
norm running buffers excepted in train mode), which keeps them safe to run
concurrently over shared weights.

Arithmetic follows the dtype of the inputs and parameters; production code
runs float32, numerical tests may cast a layer to float64 via ``cast``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .params import DTYPE, ConfigError, Param, uniform_init


def conv_out_size(size, kernel, stride, padding, dilation=1):
    """Spatial output extent of a strided, dilated sliding window."""
    effective = dilation * (kernel - 1) + 1
    return (size + 2 * padding - effective) // stride + 1


class Conv2d:
    """2-d convolution with stride, zero padding, and dilation.

    Weight shape is (k, k, in_channels, out_channels); bias starts at zero.
    The forward loops over the k*k kernel taps, each tap a strided slice of
    the padded input matrix-multiplied against that tap's weight plane.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 dilation=1, rng=None, name="conv"):
        if kernel < 1 or stride < 1 or dilation < 1 or padding < 0:
            raise ConfigError(f"{name}: bad geometry kernel={kernel} stride={stride} "
                              f"padding={padding} dilation={dilation}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.name = name
        fan_in = in_channels * kernel * kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(uniform_init(rng, (kernel, kernel, in_channels, out_channels), fan_in),
                            name=f"{name}.weight")
        self.bias = Param(np.zeros(out_channels, dtype=DTYPE), name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def cast(self, dtype):
        self.weight.cast(dtype)
        self.bias.cast(dtype)

    def _out_shape(self, h, w):
        ho = conv_out_size(h, self.kernel, self.stride, self.padding, self.dilation)
        wo = conv_out_size(w, self.kernel, self.stride, self.padding, self.dilation)
        if ho < 1 or wo < 1:
            raise ConfigError(f"{self.name}: input {h}x{w} too small for kernel={self.kernel} "
                              f"stride={self.stride} padding={self.padding} dilation={self.dilation}")
        return ho, wo

    def forward(self, x, train=False):
        h, w, c = x.shape
        if c != self.in_channels:
            raise ConfigError(f"{self.name}: input has {c} channels, expected {self.in_channels}")
        ho, wo = self._out_shape(h, w)
        p, s, d, k = self.padding, self.stride, self.dilation, self.kernel
        xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
        wv = self.weight.value
        acc = np.zeros((ho * wo, self.out_channels), dtype=np.result_type(x.dtype, wv.dtype))
        for i in range(k):
            for j in range(k):
                view = xp[i * d:i * d + (ho - 1) * s + 1:s,
                          j * d:j * d + (wo - 1) * s + 1:s]
                acc += view.reshape(ho * wo, c) @ wv[i, j]
        y = acc.reshape(ho, wo, self.out_channels) + self.bias.value
        cache = (x.shape, xp, ho, wo) if train else None
        return y, cache

    def backward(self, grad_out, cache):
        (h, w, c), xp, ho, wo = cache
        p, s, d, k = self.padding, self.stride, self.dilation, self.kernel
        g2 = grad_out.reshape(ho * wo, self.out_channels)
        wv = self.weight.value
        self.bias.grad += g2.sum(axis=0)
        gxp = np.zeros(xp.shape, dtype=np.result_type(grad_out.dtype, wv.dtype))
        for i in range(k):
            for j in range(k):
                rows = slice(i * d, i * d + (ho - 1) * s + 1, s)
                cols = slice(j * d, j * d + (wo - 1) * s + 1, s)
                view = xp[rows, cols].reshape(ho * wo, c)
                self.weight.grad[i, j] += view.T @ g2
                gxp[rows, cols] += (g2 @ wv[i, j].T).reshape(ho, wo, c)
        return gxp[p:p + h, p:p + w] if p else gxp


class MaxPool2d:
    """Max pooling; padded border cells never win the max.

    Backward routes each output's gradient to the first maximal input cell
    in row-major window order.
    """

    def __init__(self, kernel, stride, padding=0):
        if kernel < 1 or stride < 1:
            raise ConfigError(f"maxpool: bad kernel={kernel} stride={stride}")
        if not 0 <= padding < kernel:
            raise ConfigError(f"maxpool: padding {padding} must be in [0, {kernel})")
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def params(self):
        return []

    def cast(self, dtype):
        pass

    def forward(self, x, train=False):
        h, w, c = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        ho = conv_out_size(h, k, s, p)
        wo = conv_out_size(w, k, s, p)
        if ho < 1 or wo < 1:
            raise ConfigError(f"maxpool: input {h}x{w} too small for kernel={k}")
        if p:
            xp = np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=-np.inf)
        else:
            xp = x
        win = sliding_window_view(xp, (k, k), axis=(0, 1))[::s, ::s]
        flat = win.reshape(ho, wo, c, k * k)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        cache = (x.shape, idx, ho, wo) if train else None
        return np.ascontiguousarray(y), cache

    def backward(self, grad_out, cache):
        (h, w, c), idx, ho, wo = cache
        k, s, p = self.kernel, self.stride, self.padding
        rows = np.arange(ho)[:, None, None] * s + idx // k - p
        cols = np.arange(wo)[None, :, None] * s + idx % k - p
        chan = np.broadcast_to(np.arange(c)[None, None, :], idx.shape)
        gx = np.zeros((h, w, c), dtype=grad_out.dtype)
        np.add.at(gx, (rows, cols, chan), grad_out)
        return gx


class Affine:
    """Dense layer y = x @ W + b applied over the last axis."""

    def __init__(self, in_features, out_features, rng=None, name="affine"):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(uniform_init(rng, (in_features, out_features), in_features),
                            name=f"{name}.weight")
        self.bias = Param(np.zeros(out_features, dtype=DTYPE), name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def cast(self, dtype):
        self.weight.cast(dtype)
        self.bias.cast(dtype)

    def forward(self, x, train=False):
        if x.shape[-1] != self.in_features:
            raise ConfigError(f"{self.name}: input has {x.shape[-1]} features, "
                              f"expected {self.in_features}")
        y = x @ self.weight.value + self.bias.value
        cache = x if train else None
        return y, cache

    def backward(self, grad_out, cache):
        x = cache
        g2 = grad_out.reshape(-1, self.out_features)
        x2 = x.reshape(-1, self.in_features)
        self.weight.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return (g2 @ self.weight.value.T).reshape(x.shape)


class ReLU:
    def params(self):
        return []

    def cast(self, dtype):
        pass

    def forward(self, x, train=False):
        y = np.maximum(x, 0)
        cache = (x > 0) if train else None
        return y, cache

    def backward(self, grad_out, cache):
        return grad_out * cache


class BatchNorm2d:
    """Per-channel normalization over the spatial extent of one map.

    Train mode normalizes with the current map's statistics and folds them
    into running buffers (exponential average, biased variance); eval mode
    normalizes with the running buffers.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, name="bn"):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Param(np.ones(channels, dtype=DTYPE), name=f"{name}.gamma")
        self.beta = Param(np.zeros(channels, dtype=DTYPE), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def set_buffers(self, mean, var):
        self.running_mean = np.asarray(mean, dtype=self.running_mean.dtype).copy()
        self.running_var = np.asarray(var, dtype=self.running_var.dtype).copy()

    def cast(self, dtype):
        self.gamma.cast(dtype)
        self.beta.cast(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x, train=False, want_cache=None):
        if x.shape[-1] != self.channels:
            raise ConfigError(f"{self.name}: input has {x.shape[-1]} channels, "
                              f"expected {self.channels}")
        if train:
            mu = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
        else:
            mu = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xh = (x - mu) * inv
        y = self.gamma.value * xh + self.beta.value
        want = train if want_cache is None else want_cache
        cache = (xh, inv, train) if want else None
        return y, cache

    def backward(self, grad_out, cache):
        xh, inv, was_train = cache
        self.gamma.grad += (grad_out * xh).sum(axis=(0, 1))
        self.beta.grad += grad_out.sum(axis=(0, 1))
        scale = self.gamma.value * inv
        if not was_train:
            return grad_out * scale
        gm = grad_out.mean(axis=(0, 1))
        gxm = (grad_out * xh).mean(axis=(0, 1))
        return scale * (grad_out - gm - xh * gxm)


class BilinearUpsample:
    """Fixed bilinear upsampling by an integer factor.

    Linear in the input, so backward is the exact transpose of forward.
    Sample positions follow the half-pixel-center convention.
    """

    def __init__(self, factor):
        if factor < 1:
            raise ConfigError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor
        self._mats = {}

    def params(self):
        return []

    def cast(self, dtype):
        self._mats.clear()

    def _matrix(self, n, dtype):
        key = (n, np.dtype(dtype).name)
        if key not in self._mats:
            out = n * self.factor
            src = (np.arange(out, dtype=np.float64) + 0.5) / self.factor - 0.5
            src = np.clip(src, 0.0, n - 1.0)
            lo = np.floor(src).astype(np.int64)
            hi = np.minimum(lo + 1, n - 1)
            w_hi = src - lo
            m = np.zeros((out, n), dtype=np.float64)
            m[np.arange(out), lo] += 1.0 - w_hi
            m[np.arange(out), hi] += w_hi
            self._mats[key] = m.astype(dtype)
        return self._mats[key]

    def forward(self, x, train=False):
        h, w, _ = x.shape
        r = self._matrix(h, x.dtype)
        c = self._matrix(w, x.dtype)
        y = np.einsum("Hh,hwc,Ww->HWc", r, x, c, optimize=True)
        cache = (h, w) if train else None
        return y, cache

    def backward(self, grad_out, cache):
        h, w = cache
        r = self._matrix(h, grad_out.dtype)
        c = self._matrix(w, grad_out.dtype)
        return np.einsum("Hh,HWc,Ww->hwc", r, grad_out, c, optimize=True)


def pad_to_multiple(x, multiple, mode="reflect"):
    """Pad the bottom/right of an (h, w, c) map so both extents divide evenly.

    Returns (padded, (h, w)). ``mode`` is any np.pad mode; annotations use
    constant zeros, images reflect.
    """
    h, w = x.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    if mode == "reflect" and (h == 1 or w == 1):
        mode = "edge"
    return np.pad(x, ((0, ph), (0, pw), (0, 0)), mode=mode), (h, w)


def crop_to(x, h, w):
    return x[:h, :w]
