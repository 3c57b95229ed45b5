"""Softmax and cross-entropy over per-pixel class logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ConfigError


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class CrossEntropyOut:
    """loss is the mean negative log-likelihood over counted pixels; grad has
    the logits' shape; valid_pixels == 0 flags an all-ignored target."""
    loss: float
    grad: np.ndarray
    valid_pixels: int


def softmax_cross_entropy(logits, labels, ignore_index=255):
    """Pixelwise cross entropy on (h, w, C) logits and an (h, w) label map.

    Pixels labeled ignore_index contribute nothing to loss or gradient.
    With every pixel ignored the loss is defined as 0 with a zero gradient,
    flagged by valid_pixels == 0.
    """
    h, w, num_classes = logits.shape
    if labels.shape != (h, w):
        raise ConfigError(f"labels shape {labels.shape} does not match logits {(h, w)}")
    valid = labels != ignore_index
    grad = np.zeros_like(logits)
    n = int(valid.sum())
    if n == 0:
        return CrossEntropyOut(0.0, grad, 0)
    lab = labels[valid].astype(np.int64)
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ConfigError(f"labels must lie in [0, {num_classes}) or equal {ignore_index}")
    lv = logits[valid]
    shifted = lv - lv.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(n)
    loss = float((log_z - shifted[rows, lab]).mean())
    g = np.exp(shifted) / np.exp(log_z)[:, None]
    g[rows, lab] -= 1.0
    g /= n
    grad[valid] = g.astype(grad.dtype)
    return CrossEntropyOut(loss, grad, n)
