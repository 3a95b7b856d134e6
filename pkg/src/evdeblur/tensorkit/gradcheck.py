"""Finite-difference verification of recorded gradients.

An operation is scalarized by summing its output against a fixed random
cotangent; tape gradients are then compared against central differences
element by element.
"""

from __future__ import annotations

import numpy as np

from .core import Tape, Tensor

GRAD_ATOL_FLOOR = 1e-8


def grad_check(fn, inputs: list[Tensor], eps: float = 1e-5, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    fn maps the input tensors to one output tensor.  Relative error per
    element is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|); the max over
    all elements of all inputs is returned.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(inputs)
    cotangent = rng.standard_normal(out.data.shape)
    Tape(out).backward(cotangent)

    worst = 0.0
    for t in inputs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(np.sum(fn(inputs).data * cotangent))
            flat[i] = keep - eps
            lo = float(np.sum(fn(inputs).data * cotangent))
            flat[i] = keep
            g_fd = (hi - lo) / (2.0 * eps)
            g = g_ad.reshape(-1)[i]
            err = abs(g - g_fd) / max(GRAD_ATOL_FLOOR, abs(g) + abs(g_fd))
            worst = max(worst, err)
    return worst
