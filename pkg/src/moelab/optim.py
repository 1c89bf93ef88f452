"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

# Not exposed through run configs, so every metrics file records them.
ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8


def hyperparams(weight_decay: float, **lrs: float) -> dict:
    """Update-rule constants for run metadata; pass learning rates by role."""
    return {"name": "adamw", "betas": list(ADAMW_BETAS), "eps": ADAMW_EPS,
            "weight_decay": weight_decay, **lrs}


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = ADAMW_BETAS,
    eps: float = ADAMW_EPS,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One functional step; t is the 1-based step count."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    param = param - lr * mhat / (np.sqrt(vhat) + eps) - lr * weight_decay * param
    return param, m, v


class AdamW:
    """Holds first/second-moment state per parameter tensor.

    Parameters are mutated in place between steps; the caller is
    responsible for zeroing gradients afterwards.
    """

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        lr: float,
        betas: tuple[float, float] = ADAMW_BETAS,
        eps: float = ADAMW_EPS,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            p.data, self.m[name], self.v[name] = adamw_update(
                p.data, p.grad, self.m[name], self.v[name], self.t,
                self.lr, self.betas, self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))
