"""Parameter container and shared error types for the layer kernels."""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class ConfigError(ValueError):
    """A layer, model, or run was configured inconsistently."""


class GradientError(RuntimeError):
    """An optimizer step saw a non-finite gradient."""


class Param:
    """A learnable array together with its gradient and momentum buffer.

    All three arrays always share shape and dtype. Gradients accumulate
    across backward calls until ``zero_grad`` is called.
    """

    __slots__ = ("name", "value", "grad", "momentum")

    def __init__(self, value, name="param"):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def cast(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum = self.momentum.astype(dtype)

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape}, dtype={self.value.dtype})"


def zero_grads(params):
    for p in params:
        p.zero_grad()


def uniform_init(rng, shape, fan_in, dtype=DTYPE):
    """Fan-in scaled uniform draw, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
