"""Spreading sparse annotation features over the image plane.

The diffusion operator runs n passes of a fixed 3x3 all-ones convolution
(stride 1, zero padding 1) over the embedded annotation map and mixes the
passes with learnable scalars:

    out = sum_i w_i * box^i(x),   i = 1..n

After pass i a single source pixel covers the (2i+1)x(2i+1) square around
it, clipped at the borders. Because later passes reach farther, pixels near
sources are touched by more passes than pixels at the fringe; the weighted
sum is therefore divided elementwise by the number of passes whose support
reaches each pixel (clamped to at least 1). The backward pass treats that
coverage count as a constant scale.

The embedding layer maps raw annotation vectors through one shared affine
transform and rescales each annotated pixel's output to unit length;
unannotated (all-zero) pixels stay exactly zero, so the affine bias cannot
leak into empty space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, MaxPool2d, Param, uniform_init
from .nn.params import DTYPE

FUSE_KERNEL = 6
FUSE_STRIDE = 4
FUSE_PADDING = 1


def box3(x):
    """3x3 all-ones convolution, stride 1, zero padding 1, any channel count."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    h, w = x.shape[:2]
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += xp[di:di + h, dj:dj + w]
    return out


def _dilate(support):
    """One 3x3 binary dilation of an (h, w) boolean mask."""
    sp = np.pad(support, 1)
    h, w = support.shape
    out = np.zeros_like(support)
    for di in range(3):
        for dj in range(3):
            out |= sp[di:di + h, dj:dj + w]
    return out


class DiffusionOperator:
    """n diffusion passes with one learnable scalar weight per pass."""

    def __init__(self, n, init="ones", name="diffusion"):
        if n < 1:
            raise ConfigError(f"diffusion needs at least one pass, got n={n}")
        self.n = n
        self.name = name
        if init == "ones":
            w = np.ones(n, dtype=DTYPE)
        elif init == "first_one_rest_zero":
            w = np.zeros(n, dtype=DTYPE)
            w[0] = 1.0
        else:
            raise ConfigError(f"unknown diffusion weight init {init!r}")
        self.weights = Param(w, name=f"{name}.weights")

    def params(self):
        return [self.weights]

    def cast(self, dtype):
        self.weights.cast(dtype)

    def reinit(self, mode):
        fresh = DiffusionOperator(self.n, init=mode)
        self.weights.value[...] = fresh.weights.value.astype(self.weights.value.dtype)
        self.weights.momentum[...] = 0.0


def coverage_map(x, n):
    """Count, per pixel, how many of the n passes' supports reach it."""
    support = np.any(x != 0, axis=2)
    cov = np.zeros(x.shape[:2], dtype=np.int32)
    for _ in range(n):
        support = _dilate(support)
        cov += support
    return cov


def diffuse(x, op: DiffusionOperator):
    """Run the operator; returns (diffused map, coverage counts)."""
    out, _, cov = _diffuse_full(x, op)
    return out, cov


def _diffuse_full(x, op):
    w = op.weights.value
    passes = []
    cur = x
    for _ in range(op.n):
        cur = box3(cur)
        passes.append(cur)
    cov = coverage_map(x, op.n)
    acc = np.zeros_like(x)
    for i in range(op.n):
        acc += w[i].astype(acc.dtype) * passes[i]
    out = acc / np.maximum(cov, 1)[..., None].astype(acc.dtype)
    return out, passes, cov


def diffuse_backward(upstream_grad, x, op: DiffusionOperator, passes=None, cov=None):
    """Gradients of the diffused map w.r.t. pass weights and the input map.

    The box kernel is symmetric with zero padding, so the adjoint of each
    pass is the pass itself; coverage is held constant. Accumulates into
    ``op.weights.grad`` and also returns (weight_grads, input_grad).
    """
    if passes is None or cov is None:
        _, passes, cov = _diffuse_full(x, op)
    g = upstream_grad / np.maximum(cov, 1)[..., None].astype(upstream_grad.dtype)
    w = op.weights.value
    wg = np.array([float((g * passes[i]).sum()) for i in range(op.n)], dtype=np.float64)
    gx = np.zeros_like(g)
    cur = g
    for i in range(op.n):
        cur = box3(cur)
        gx += w[i].astype(gx.dtype) * cur
    op.weights.grad += wg.astype(op.weights.grad.dtype)
    return wg, gx


class EmbeddingLayer:
    """Shared affine embedding of raw annotation vectors, unit-rescaled.

    Annotated pixels (any nonzero channel) map through y = v @ W + b and are
    rescaled to unit length; all-zero pixels stay zero.
    """

    def __init__(self, raw_channels, dim, rng=None, name="embedding"):
        if raw_channels < 1 or dim < 1:
            raise ConfigError(f"embedding needs positive sizes, got {raw_channels}->{dim}")
        self.raw_channels = raw_channels
        self.dim = dim
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(uniform_init(rng, (raw_channels, dim), raw_channels),
                            name=f"{name}.weight")
        self.bias = Param(np.zeros(dim, dtype=DTYPE), name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def cast(self, dtype):
        self.weight.cast(dtype)
        self.bias.cast(dtype)

    def forward(self, raw_map, train=False):
        h, w, c = raw_map.shape
        if c != self.raw_channels:
            raise ConfigError(f"{self.name}: raw map has {c} channels, "
                              f"expected {self.raw_channels}")
        mask = np.any(raw_map != 0, axis=2)
        out = np.zeros((h, w, self.dim), dtype=np.result_type(raw_map.dtype, self.weight.value.dtype))
        v = raw_map[mask]
        if v.size:
            pre = v @ self.weight.value + self.bias.value
            norms = np.maximum(np.linalg.norm(pre, axis=1), 1e-12)
            out[mask] = pre / norms[:, None]
        else:
            pre = np.zeros((0, self.dim), dtype=out.dtype)
            norms = np.zeros(0, dtype=out.dtype)
        cache = (mask, v, pre, norms) if train else None
        return out, cache

    def backward(self, grad_out, cache):
        """Accumulates weight/bias gradients; the raw map itself is data."""
        mask, v, pre, norms = cache
        if v.size == 0:
            return
        gy = grad_out[mask]
        y = pre / norms[:, None]
        dot = (gy * y).sum(axis=1, keepdims=True)
        gpre = (gy - dot * y) / norms[:, None]
        self.weight.grad += v.T @ gpre
        self.bias.grad += gpre.sum(axis=0)


@dataclass
class SideInfoMap:
    """Side-information tensors produced for one image.

    full_res: embedded annotation map at image resolution (h, w, d)
    diffused: full_res after the diffusion operator
    fused_res: diffused map pooled onto the quarter-resolution grid
    coverage: per-pixel diffusion pass counts
    """
    full_res: np.ndarray
    diffused: np.ndarray
    fused_res: np.ndarray
    coverage: np.ndarray


_fuse_pool = MaxPool2d(FUSE_KERNEL, FUSE_STRIDE, FUSE_PADDING)


def pool_to_grid(x_diffused, train=False):
    """Max pool the diffused side map onto the backbone's quarter-res grid."""
    return _fuse_pool.forward(x_diffused, train=train)


def pool_to_grid_backward(grad_out, cache):
    return _fuse_pool.backward(grad_out, cache)


def fuse(x_diffused, backbone_feat):
    """Pool the side map and concatenate it behind the backbone channels.

    The pooled grid must match the backbone's spatial size exactly.
    """
    pooled, _ = pool_to_grid(x_diffused)
    if pooled.shape[:2] != backbone_feat.shape[:2]:
        raise ConfigError(f"fusion grid mismatch: side pooled to {pooled.shape[:2]}, "
                          f"backbone at {backbone_feat.shape[:2]}")
    return np.concatenate([backbone_feat, pooled.astype(backbone_feat.dtype)], axis=2)


def build_side_map(aset, embedding: EmbeddingLayer, op: DiffusionOperator,
                   raw_map=None) -> SideInfoMap:
    """Rasterize (unless given), embed, diffuse, and pool one annotation set."""
    from .annotations import rasterize

    if raw_map is None:
        raw_map = rasterize(aset)
    full, _ = embedding.forward(raw_map)
    diffused, cov = diffuse(full, op)
    pooled, _ = pool_to_grid(diffused)
    return SideInfoMap(full_res=full, diffused=diffused, fused_res=pooled, coverage=cov)
