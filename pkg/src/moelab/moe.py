"""Noisy top-k expert gating, sparse dispatch, and the load-balance loss.

A gate decision is made per token: noisy logits H(x) are masked down
to a selected expert set and renormalized with a softmax, and only the
selected experts ever run. Selection itself is non-differentiable and
treated as constant; gradients flow through the kept logits and the
expert outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class RouterParams:
    w_gate: Tensor   # (d_model, n_experts)
    w_noise: Tensor  # (d_model, n_experts)

    def __post_init__(self):
        if self.w_gate.shape != self.w_noise.shape or self.w_gate.ndim != 2:
            raise ShapeError("router weight matrices must share shape (d_model, n_experts)")

    @classmethod
    def build(cls, d_model: int, n_experts: int, rng: np.random.Generator, std: float = 0.02):
        # Deliberately small: gates start near-uniform (but tie-free), so
        # early routing is shaped by the balance loss rather than the init.
        return cls(
            w_gate=Tensor(rng.normal(0.0, std, (d_model, n_experts)), requires_grad=True),
            w_noise=Tensor(rng.normal(0.0, std, (d_model, n_experts)), requires_grad=True),
        )


class Expert:
    """Two-layer gelu feed-forward block; also serves as the dense FFN."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator,
                 out_scale: float = 1.0):
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_ff)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, out_scale / np.sqrt(d_ff), (d_ff, d_model)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(T.gelu(T.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


# routing modes -----------------------------------------------------------


@dataclass(frozen=True)
class TopK:
    k: int


@dataclass(frozen=True)
class AllExperts:
    pass


@dataclass
class FixedSets:
    """Replay precomputed per-layer expert sets: sets[ordinal] is (T, count)."""

    sets: list[np.ndarray]


@dataclass
class SampledSets:
    """Choose expert sets live from the full gate distribution.

    select(ordinal, full_probs (T,N)) -> (T, count) int indices.
    """

    select: Callable[[int, np.ndarray], np.ndarray]


RoutingMode = TopK | AllExperts | FixedSets | SampledSets


@dataclass
class GateDecision:
    """Per-token gate record for one MoE layer over a token batch."""

    logits: np.ndarray      # (T, N) raw H(x), detached copy
    selected: np.ndarray    # (T, count) ascending expert indices
    probs: Tensor           # (T, N) renormalized gates, zero off-selection
    noise_applied: bool

    def full_softmax(self) -> np.ndarray:
        """Softmax over all N experts, before any selection mask."""
        return softmax_rows(self.logits)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Plain rowwise softmax on a detached array."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def gate_logits(
    x: Tensor,
    router: RouterParams,
    noisy: bool = False,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """H(x) = x W_g (+ eps * softplus(x W_noise) when noisy).

    eps is a standard-normal draw treated as a constant; pass it
    explicitly to freeze the noise across calls.
    """
    if x.ndim != 2 or x.shape[1] != router.w_gate.shape[0]:
        raise ShapeError(f"token batch {x.shape} does not match router {router.w_gate.shape}")
    clean = T.matmul(x, router.w_gate)
    if not noisy:
        return clean
    if eps is None:
        if rng is None:
            raise ContractError("noisy gating needs an rng or explicit eps")
        eps = rng.standard_normal(clean.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != clean.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match logits {clean.shape}")
    return clean + T.mul(Tensor(eps), T.softplus(T.matmul(x, router.w_noise)))


def keep_top_k(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries per row, set the rest to -inf.

    Ties break toward the lower index. Accepts (N,) or (T,N).
    """
    arr = np.asarray(v, dtype=np.float64)
    n = arr.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside 1..{n}")
    flat = arr.reshape(-1, n)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    rows = np.arange(flat.shape[0])[:, None]
    out = np.full_like(flat, -np.inf)
    out[rows, order] = flat[rows, order]
    return out.reshape(arr.shape)


def _selection_mask(selected: np.ndarray, t: int, n: int) -> np.ndarray:
    mask = np.zeros((t, n), dtype=bool)
    mask[np.arange(t)[:, None], selected] = True
    return mask


def gate_probs(logits: Tensor, selected) -> GateDecision:
    """Renormalize logits over a selection: G = softmax(mask(H)).

    `selected` is a boolean keep-mask (T,N) or a keep_top_k-style array
    whose finite entries mark the selection.
    """
    sel = np.asarray(selected)
    if sel.dtype != bool:
        sel = np.isfinite(sel)
    if sel.shape != logits.shape:
        raise ShapeError(f"selection {sel.shape} does not match logits {logits.shape}")
    counts = sel.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("a token has an empty expert selection")
    if len(set(counts.tolist())) != 1:
        raise ContractError("expert set size must be uniform across the token batch")
    probs = T.softmax(T.mask_fill(logits, sel, -np.inf), axis=-1)
    selected_idx = np.nonzero(sel)[1].reshape(logits.shape[0], int(counts[0]))
    return GateDecision(
        logits=logits.data.copy(),
        selected=selected_idx,
        probs=probs,
        noise_applied=False,
    )


class MoELayer:
    def __init__(self, d_model: int, d_ff: int, n_experts: int, top_k: int,
                 rng: np.random.Generator, out_scale: float = 1.0):
        if not 1 <= top_k <= n_experts:
            raise ContractError(f"top_k={top_k} outside 1..{n_experts}")
        self.n_experts = n_experts
        self.top_k = top_k
        self.router = RouterParams.build(d_model, n_experts, rng)
        self.experts = [Expert(d_model, d_ff, rng, out_scale=out_scale) for _ in range(n_experts)]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("router.w_gate", self.router.w_gate), ("router.w_noise", self.router.w_noise)]
        for i, e in enumerate(self.experts):
            out.extend((f"experts.{i}.{n}", p) for n, p in e.parameters())
        return out


def moe_forward(
    x: Tensor,
    layer: MoELayer,
    mode: RoutingMode,
    noisy: bool = False,
    rng: np.random.Generator | None = None,
    ordinal: int = 0,
) -> tuple[Tensor, GateDecision]:
    """Route a token batch (T, d) through one MoE layer.

    Returns the combined expert output and the gate decision. Only
    selected experts are evaluated, each on exactly the rows that
    chose it.
    """
    t = x.shape[0]
    n = layer.n_experts
    logits = gate_logits(x, layer.router, noisy=noisy, rng=rng)

    if isinstance(mode, TopK):
        sel = np.isfinite(keep_top_k(logits.data, mode.k))
    elif isinstance(mode, AllExperts):
        sel = np.ones((t, n), dtype=bool)
    elif isinstance(mode, FixedSets):
        sel = _selection_mask(np.asarray(mode.sets[ordinal], dtype=np.intp), t, n)
    elif isinstance(mode, SampledSets):
        full = softmax_rows(logits.data)
        sel = _selection_mask(np.asarray(mode.select(ordinal, full), dtype=np.intp), t, n)
    else:
        raise ContractError(f"unknown routing mode {mode!r}")

    decision = gate_probs(logits, sel)
    decision.noise_applied = noisy

    out: Tensor | None = None
    for i in range(n):
        rows = np.nonzero(sel[:, i])[0]
        if rows.size == 0:
            continue
        weights = T.gather_pairs(decision.probs, rows, np.full(rows.size, i, dtype=np.intp))
        contrib = T.scatter_rows(
            T.scale_rows(layer.experts[i](T.gather_rows(x, rows)), weights), rows, t
        )
        out = contrib if out is None else out + contrib
    assert out is not None  # every token keeps at least one expert
    return out, decision


@dataclass
class ExpertLoad:
    m: np.ndarray  # (N,) int token counts per expert — a non-differentiable constant
    P: Tensor      # (N,) summed gate probabilities per expert

    def __post_init__(self):
        if self.P.shape != self.m.shape:
            raise ShapeError("load vectors m and P must share shape (N,)")


def load_from_decision(decision: GateDecision) -> ExpertLoad:
    n = decision.logits.shape[1]
    m = np.bincount(decision.selected.ravel(), minlength=n)
    return ExpertLoad(m=m, P=T.tsum(decision.probs, axis=0))


def _cv_squared_const(values: np.ndarray) -> float:
    mu = float(values.mean())
    sigma = float(values.std())  # population
    return (sigma / max(mu, 1e-10)) ** 2


def load_balance_loss(load: ExpertLoad) -> Tensor:
    """CV(m)^2 + CV(P)^2; only the P term carries gradient.

    The coefficient-of-variation denominator is max(mu, 1e-10) so a
    degenerate all-zero batch yields 0 instead of 0/0.
    """
    if int(load.m.sum()) == 0:
        raise ContractError("load balance over zero routed tokens")
    mu = T.tmean(load.P)
    denom = mu if mu.item() > 1e-10 else Tensor(1e-10)
    centered = load.P - mu
    cv2_p = T.tmean(centered * centered) / (denom * denom)
    return cv2_p + _cv_squared_const(load.m.astype(np.float64))
