"""Central-difference gradient checking.

The checker never touches backward(): it re-evaluates the forward
function with perturbed inputs, so it is an independent oracle for the
analytic gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], Tensor], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences, perturbing x in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = float(f().data)
        flat[i] = saved - step
        lo = float(f().data)
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic and numeric gradients.

    f must build a fresh scalar graph from `inputs` on every call.
    Relative error is max|a - n| scaled by max(1, |a|_inf, |n|_inf) so
    tiny gradients are judged absolutely.
    """
    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: f(*inputs), t.data, step)
        scale = max(1.0, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0)) / scale)
    return worst
