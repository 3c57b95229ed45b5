"""Segmentation network with side-information fusion and gated residual blocks.

Layout: a stem (7x7 stride-2 conv, then 3x3 stride-2 max pool) brings the
image to quarter resolution; the diffused annotation map is max-pooled onto
the same grid and concatenated; a 3x3 fusion conv mixes the two streams,
with the weights reading the side channels initialized to zero so the side
path starts as a no-op; a chain of gated residual blocks (two 3x3 convs
each, increasing dilation) refines the features; a 1x1 classifier head and
a fixed bilinear x4 upsample produce per-pixel logits.

Each block computes x + z * F(x) with a binary decision z from a small
relevance network over the block input's per-channel spatial mean. Training
draws z by relaxed binary sampling with a straight-through estimator, so
gradients reach the relevance network both from the task loss and from the
execution-rate penalty; eval thresholds the relevance at 0.5. A block with
z = 0 passes its input through bitwise unchanged.

Inputs whose extents are not multiples of 4 are reflect-padded (annotation
maps zero-padded) and the logits cropped back after upsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionOperator, EmbeddingLayer, SideInfoMap, _diffuse_full, \
    diffuse_backward, pool_to_grid, pool_to_grid_backward
from .nn import (
    Affine,
    BatchNorm2d,
    BilinearUpsample,
    ConfigError,
    Conv2d,
    MaxPool2d,
    ReLU,
)


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


@dataclass
class ModelConfig:
    num_classes: int
    side_channels_raw: int
    d: int = 16
    n: int = 4
    backbone_channels: int = 32
    num_gated_blocks: int = 6
    dilations: tuple = (1, 1, 2, 2, 4, 4)
    target_rate: float | None = 0.6
    gate_temperature: float = 1.0
    diffusion_init: str = "ones"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.dilations, list):
            self.dilations = tuple(self.dilations)
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.dilations) != self.num_gated_blocks:
            raise ConfigError(f"{self.num_gated_blocks} blocks but "
                              f"{len(self.dilations)} dilations")
        if self.target_rate is not None and not 0.0 <= self.target_rate <= 1.0:
            raise ConfigError(f"target_rate must lie in [0, 1], got {self.target_rate}")
        if self.gate_temperature <= 0:
            raise ConfigError("gate temperature must be positive")

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "side_channels_raw": self.side_channels_raw,
            "d": self.d,
            "n": self.n,
            "backbone_channels": self.backbone_channels,
            "num_gated_blocks": self.num_gated_blocks,
            "dilations": list(self.dilations),
            "target_rate": self.target_rate,
            "gate_temperature": self.gate_temperature,
            "diffusion_init": self.diffusion_init,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GateTrace:
    """Per-sample gate record: hard decisions, relevance scores, and the
    relaxed (pre-threshold) activations used by the rate penalty."""
    decisions: np.ndarray
    relevance: np.ndarray
    soft: np.ndarray

    @property
    def executed_fraction(self):
        return float(self.decisions.mean()) if self.decisions.size else 1.0


@dataclass
class ForwardResult:
    logits: np.ndarray
    trace: GateTrace
    side: SideInfoMap
    tape: dict | None = None


class GatedBlock:
    """Residual transform of two dilated 3x3 convs, executed on demand."""

    GATE_HIDDEN = 16

    def __init__(self, channels, dilation, temperature, rng, name="block"):
        self.channels = channels
        self.temperature = temperature
        self.name = name
        self.conv1 = Conv2d(channels, channels, 3, padding=dilation, dilation=dilation,
                            rng=rng, name=f"{name}.conv1")
        self.bn1 = BatchNorm2d(channels, name=f"{name}.bn1")
        self.conv2 = Conv2d(channels, channels, 3, padding=dilation, dilation=dilation,
                            rng=rng, name=f"{name}.conv2")
        self.bn2 = BatchNorm2d(channels, name=f"{name}.bn2")
        self.relu = ReLU()
        self.gate_fc1 = Affine(channels, self.GATE_HIDDEN, rng=rng, name=f"{name}.gate_fc1")
        self.gate_fc2 = Affine(self.GATE_HIDDEN, 1, rng=rng, name=f"{name}.gate_fc2")

    def layers(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2,
                self.gate_fc1, self.gate_fc2]

    def params(self):
        out = []
        for layer in self.layers():
            out.extend(layer.params())
        return out

    def cast(self, dtype):
        for layer in self.layers():
            layer.cast(dtype)

    def _body(self, x, train):
        y, c1 = self.conv1.forward(x, train)
        y, b1 = self.bn1.forward(y, train)
        y, r1 = self.relu.forward(y, train)
        y, c2 = self.conv2.forward(y, train)
        y, b2 = self.bn2.forward(y, train)
        return y, (c1, b1, r1, c2, b2)

    def _body_backward(self, g, caches):
        c1, b1, r1, c2, b2 = caches
        g = self.bn2.backward(g, b2)
        g = self.conv2.backward(g, c2)
        g = self.relu.backward(g, r1)
        g = self.bn1.backward(g, b1)
        g = self.conv1.backward(g, c1)
        return g

    def _gate(self, x, train):
        desc = x.mean(axis=(0, 1))
        a1, fc1_cache = self.gate_fc1.forward(desc[None, :], train)
        r1, relu_cache = self.relu.forward(a1, train)
        logit_arr, fc2_cache = self.gate_fc2.forward(r1, train)
        logit = float(logit_arr[0, 0])
        cache = (fc1_cache, relu_cache, fc2_cache, x.shape) if train else None
        return logit, cache

    def _gate_backward(self, glogit, cache, dtype):
        fc1_cache, relu_cache, fc2_cache, shape = cache
        g = np.array([[glogit]], dtype=dtype)
        g = self.gate_fc2.backward(g, fc2_cache)
        g = self.relu.backward(g, relu_cache)
        g = self.gate_fc1.backward(g, fc1_cache)
        h, w, _ = shape
        return g[0] / float(h * w)  # descriptor was a spatial mean

    def forward(self, x, train=False, rng=None, override=None):
        logit, gate_cache = self._gate(x, train)
        relevance = float(sigmoid(logit))
        if override == "on":
            z, soft = 1, relevance
        elif override == "off":
            z, soft = 0, relevance
        elif train:
            u = float(rng.uniform(1e-7, 1.0 - 1e-7))
            noise = np.log(u) - np.log1p(-u)
            soft = float(sigmoid((logit + noise) / self.temperature))
            z = int(soft > 0.5)
        else:
            soft = relevance
            z = int(relevance > 0.5)
        body_caches = None
        f_val = None
        if train or z == 1:
            f_val, body_caches = self._body(x, train)
        y = x if z == 0 else x + f_val
        cache = None
        if train:
            cache = (z, soft, f_val, body_caches, gate_cache, override)
        return y, z, relevance, soft, cache

    def backward(self, g, cache, soft_grad=0.0):
        """g is the upstream gradient; soft_grad adds the rate-penalty term
        on this block's relaxed activation."""
        z, soft, f_val, body_caches, gate_cache, override = cache
        gx = g.copy()
        if z == 1:
            gx += self._body_backward(g, body_caches)
        # a skipped block's body parameters see no gradient, but its
        # relevance network still does, through the straight-through path
        if override is None:
            gy = float((g * f_val).sum()) + float(soft_grad)
            glogit = gy * soft * (1.0 - soft) / self.temperature
            gx += self._gate_backward(glogit, gate_cache, g.dtype)
        return gx


class GatedSegModel:
    """The full segmentation engine; see the module docstring for layout."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        cb = config.backbone_channels
        self.embedding = EmbeddingLayer(config.side_channels_raw, config.d, rng=rng)
        self.diffusion = DiffusionOperator(config.n, init=config.diffusion_init)
        self.stem_conv = Conv2d(3, cb, 7, stride=2, padding=3, rng=rng, name="stem.conv")
        self.stem_bn = BatchNorm2d(cb, name="stem.bn")
        self.stem_pool = MaxPool2d(3, 2, padding=1)
        self.relu = ReLU()
        self.fusion_conv = Conv2d(cb + config.d, cb, 3, padding=1, rng=rng, name="fusion.conv")
        self.fusion_conv.weight.value[:, :, cb:, :] = 0.0  # side path starts silent
        self.fusion_bn = BatchNorm2d(cb, name="fusion.bn")
        self.blocks = [
            GatedBlock(cb, dil, config.gate_temperature, rng, name=f"block{i}")
            for i, dil in enumerate(config.dilations)
        ]
        self.head = Conv2d(cb, config.num_classes, 1, rng=rng, name="head.conv")
        self.up = BilinearUpsample(4)

    # -- parameter plumbing -------------------------------------------------

    def _layer_tree(self):
        layers = [self.embedding, self.diffusion, self.stem_conv, self.stem_bn,
                  self.fusion_conv, self.fusion_bn]
        for b in self.blocks:
            layers.extend(b.layers())
        layers.append(self.head)
        return layers

    def params(self):
        out = []
        for layer in self._layer_tree():
            out.extend(layer.params())
        return out

    def named_params(self):
        return [(p.name, p) for p in self.params()]

    def named_buffers(self):
        out = []
        for layer in self._layer_tree():
            if isinstance(layer, BatchNorm2d):
                out.extend(layer.buffers())
        return out

    def bn_layers(self):
        return [l for l in self._layer_tree() if isinstance(l, BatchNorm2d)]

    def param_groups(self):
        """(name, params, lr multiplier key) for the optimizer."""
        emb = set(id(p) for p in self.embedding.params())
        fus = set(id(p) for p in self.fusion_conv.params())
        dif = set(id(p) for p in self.diffusion.params())
        groups = {"embedding": [], "fusion": [], "diffusion": [], "base": []}
        for p in self.params():
            if id(p) in emb:
                groups["embedding"].append(p)
            elif id(p) in fus:
                groups["fusion"].append(p)
            elif id(p) in dif:
                groups["diffusion"].append(p)
            else:
                groups["base"].append(p)
        return groups

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def cast(self, dtype):
        for layer in self._layer_tree():
            layer.cast(dtype)
        self.up.cast(dtype)

    # -- forward / backward -------------------------------------------------

    def forward(self, image, raw_side=None, mode="eval", rng=None, gate_override=None):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ConfigError(f"image must be (h, w, 3), got {image.shape}")
        train = mode == "train"
        if train and rng is None and gate_override is None and self.config.target_rate is not None:
            raise ConfigError("training forward needs an rng for gate sampling")
        if self.config.target_rate is None and gate_override is None:
            gate_override = "on"
        h, w = image.shape[:2]
        c_raw = self.config.side_channels_raw
        if raw_side is None:
            raw_side = np.zeros((h, w, c_raw), dtype=image.dtype)
        if raw_side.shape[:2] != (h, w):
            raise ConfigError(f"side map {raw_side.shape[:2]} does not match image {(h, w)}")

        ph = (-h) % 4
        pw = (-w) % 4
        if ph or pw:
            ridx = np.pad(np.arange(h), (0, ph), mode="reflect")
            cidx = np.pad(np.arange(w), (0, pw), mode="reflect")
            x_img = image[ridx][:, cidx]
            x_side = np.pad(raw_side, ((0, ph), (0, pw), (0, 0)))
        else:
            x_img, x_side = image, raw_side

        # image stem to quarter resolution
        y, stem_conv_c = self.stem_conv.forward(x_img, train)
        y, stem_bn_c = self.stem_bn.forward(y, train)
        y, stem_relu_c = self.relu.forward(y, train)
        backbone, stem_pool_c = self.stem_pool.forward(y, train)

        # side path: embed, diffuse, pool onto the same grid
        full, emb_c = self.embedding.forward(x_side, train)
        diffused, passes, cov = _diffuse_full(full, self.diffusion)
        pooled, side_pool_c = pool_to_grid(diffused, train)
        if pooled.shape[:2] != backbone.shape[:2]:
            raise ConfigError(f"fusion grid mismatch: side {pooled.shape[:2]} "
                              f"vs backbone {backbone.shape[:2]}")
        side = SideInfoMap(full_res=full, diffused=diffused, fused_res=pooled, coverage=cov)

        fused = np.concatenate([backbone, pooled.astype(backbone.dtype)], axis=2)
        y, fusion_conv_c = self.fusion_conv.forward(fused, train)
        y, fusion_bn_c = self.fusion_bn.forward(y, train)
        x_blk, fusion_relu_c = self.relu.forward(y, train)

        decisions = np.zeros(len(self.blocks), dtype=np.int8)
        relevance = np.zeros(len(self.blocks))
        soft = np.zeros(len(self.blocks))
        block_caches = []
        for i, block in enumerate(self.blocks):
            x_blk, z, rel, sft, bc = block.forward(x_blk, train=train, rng=rng,
                                                   override=gate_override)
            decisions[i] = z
            relevance[i] = rel
            soft[i] = sft
            block_caches.append(bc)

        logits_low, head_c = self.head.forward(x_blk, train)
        logits_pad, up_c = self.up.forward(logits_low, train)
        logits = logits_pad[:h, :w]

        trace = GateTrace(decisions=decisions, relevance=relevance, soft=soft)
        tape = None
        if train:
            tape = {
                "size": (h, w),
                "pad_size": logits_pad.shape[:2],
                "stem": (stem_conv_c, stem_bn_c, stem_relu_c, stem_pool_c),
                "side": (emb_c, passes, cov, side_pool_c, full),
                "fusion": (fusion_conv_c, fusion_bn_c, fusion_relu_c),
                "blocks": block_caches,
                "head": head_c,
                "up": up_c,
            }
        return ForwardResult(logits=logits, trace=trace, side=side, tape=tape)

    def backward(self, grad_logits, tape, gate_soft_grads=None):
        """Propagate per-pixel logit gradients through the whole engine.

        gate_soft_grads, when given, carries the rate penalty's gradient on
        each block's relaxed activation. Parameter gradients accumulate in
        place; the image gradient is not materialized.
        """
        h, w = tape["size"]
        ph, pw = tape["pad_size"]
        if (h, w) != (ph, pw):
            g = np.zeros((ph, pw) + grad_logits.shape[2:], dtype=grad_logits.dtype)
            g[:h, :w] = grad_logits
        else:
            g = grad_logits
        g = self.up.backward(g, tape["up"])
        g = self.head.backward(g, tape["head"])

        if gate_soft_grads is None:
            gate_soft_grads = np.zeros(len(self.blocks))
        for block, cache, sg in zip(reversed(self.blocks), reversed(tape["blocks"]),
                                    reversed(gate_soft_grads)):
            g = block.backward(g, cache, soft_grad=sg)

        fusion_conv_c, fusion_bn_c, fusion_relu_c = tape["fusion"]
        g = self.relu.backward(g, fusion_relu_c)
        g = self.fusion_bn.backward(g, fusion_bn_c)
        g = self.fusion_conv.backward(g, fusion_conv_c)

        cb = self.config.backbone_channels
        g_backbone = g[..., :cb]
        g_side = np.ascontiguousarray(g[..., cb:])

        emb_c, passes, cov, side_pool_c, full = tape["side"]
        g_diffused = pool_to_grid_backward(g_side, side_pool_c)
        _, g_full = diffuse_backward(g_diffused, full, self.diffusion,
                                     passes=passes, cov=cov)
        self.embedding.backward(g_full, emb_c)

        stem_conv_c, stem_bn_c, stem_relu_c, stem_pool_c = tape["stem"]
        g = self.stem_pool.backward(g_backbone, stem_pool_c)
        g = self.relu.backward(g, stem_relu_c)
        g = self.stem_bn.backward(g, stem_bn_c)
        self.stem_conv.backward(g, stem_conv_c)
