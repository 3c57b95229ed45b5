"""Central-difference gradient verification."""

from __future__ import annotations

import numpy as np


def grad_check(f, param, eps=1e-3):
    """Compare ``param.grad`` produced by ``f`` against central differences.

    ``f()`` must evaluate a scalar loss and leave its analytic gradient in
    ``param.grad`` (zeroing its own accumulation first). Every coordinate of
    the parameter is perturbed by +-eps in place. Returns the maximum of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over coordinates.

    Run the model under check in float64; float32 round-off can exceed the
    differences being measured.
    """
    param.zero_grad()
    f()
    analytic = param.grad.copy().ravel()
    flat = param.value.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        loss_hi = float(f())
        flat[i] = orig - eps
        loss_lo = float(f())
        flat[i] = orig
        numeric = (loss_hi - loss_lo) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
