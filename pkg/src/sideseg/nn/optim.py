"""Momentum SGD over Param lists."""

from __future__ import annotations

import numpy as np

from .params import GradientError


def sgd_step(params, lr, momentum=0.9):
    """One momentum update: buf <- momentum*buf + grad; value <- value - lr*buf.

    All gradients are validated before any parameter moves, so a non-finite
    gradient aborts the step with the offending parameter named.
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            raise GradientError(f"non-finite gradient in {p.name}")
    for p in params:
        p.momentum *= momentum
        p.momentum += p.grad
        p.value -= lr * p.momentum
