"""Byte-level decoder-only transformer, dense or with MoE feed-forward layers.

Pre-norm blocks, learned positional embeddings, causal attention.
Sequences are processed as a padded batch flattened to (B*T, d) for
all position-wise work; attention runs batched per head. Padding sits
at the tail of each row, so the causal mask already keeps it out of
every valid position's receptive field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import EOS, PAD, VOCAB_SIZE
from .errors import ConfigError, ContractError
from .moe import (
    AllExperts,
    Expert,
    GateDecision,
    MoELayer,
    RoutingMode,
    TopK,
    moe_forward,
)
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class MoESpec:
    n_experts: int
    top_k: int
    layer_indices: tuple[int, ...]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    vocab_size: int = VOCAB_SIZE
    moe: MoESpec | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.moe is not None:
            if not 1 <= self.moe.top_k <= self.moe.n_experts:
                raise ConfigError(f"top_k={self.moe.top_k} outside 1..{self.moe.n_experts}")
            bad = [i for i in self.moe.layer_indices if not 0 <= i < self.n_layers]
            if bad:
                raise ConfigError(f"moe layer indices {bad} outside 0..{self.n_layers - 1}")

    def to_dict(self) -> dict:
        out = {
            "d_model": self.d_model, "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_ff": self.d_ff, "max_seq_len": self.max_seq_len, "vocab_size": self.vocab_size,
        }
        if self.moe is not None:
            out["moe"] = {
                "n_experts": self.moe.n_experts, "top_k": self.moe.top_k,
                "layer_indices": list(self.moe.layer_indices),
            }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        moe = d.get("moe")
        spec = None
        if moe is not None:
            spec = MoESpec(moe["n_experts"], moe["top_k"], tuple(moe["layer_indices"]))
        return cls(
            d_model=d["d_model"], n_layers=d["n_layers"], n_heads=d["n_heads"],
            d_ff=d["d_ff"], max_seq_len=d["max_seq_len"],
            vocab_size=d.get("vocab_size", VOCAB_SIZE), moe=spec,
        )


class Attention:
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 out_scale: float = 1.0):
        # N(0, 1/fan_in) keeps activations O(1) at these widths; the extra
        # out_scale on residual-writing projections tames depth.
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        std = 1.0 / np.sqrt(d_model)
        self.w_qkv = Tensor(rng.normal(0.0, std, (d_model, 3 * d_model)), requires_grad=True)
        self.w_out = Tensor(rng.normal(0.0, std * out_scale, (d_model, d_model)), requires_grad=True)

    def __call__(self, x_flat: Tensor, batch: int, seq: int, causal: np.ndarray) -> Tensor:
        d = self.w_qkv.shape[0]
        h, dh = self.n_heads, self.d_head
        qkv = T.matmul(x_flat, self.w_qkv)

        def split_heads(t: Tensor) -> Tensor:
            return T.reshape(T.permute(T.reshape(t, (batch, seq, h, dh)), (0, 2, 1, 3)),
                             (batch * h, seq, dh))

        q = split_heads(T.slice_cols(qkv, 0, d))
        k = split_heads(T.slice_cols(qkv, d, 2 * d))
        v = split_heads(T.slice_cols(qkv, 2 * d, 3 * d))
        scores = T.bmm(q, T.permute(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        scores = T.mask_fill(scores, causal[None, :, :], -np.inf)
        ctx = T.bmm(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.permute(T.reshape(ctx, (batch, h, seq, dh)), (0, 2, 1, 3)),
                           (batch * seq, d))
        return T.matmul(merged, self.w_out)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("w_qkv", self.w_qkv), ("w_out", self.w_out)]


class Block:
    def __init__(self, config: ModelConfig, index: int, rng: np.random.Generator):
        d = config.d_model
        out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
        self.index = index
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.attn = Attention(d, config.n_heads, rng, out_scale=out_scale)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)
        self.is_moe = config.moe is not None and index in config.moe.layer_indices
        if self.is_moe:
            self.ffn: Expert | MoELayer = MoELayer(
                d, config.d_ff, config.moe.n_experts, config.moe.top_k, rng, out_scale=out_scale
            )
        else:
            self.ffn = Expert(d, config.d_ff, rng, out_scale=out_scale)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("ln1.gamma", self.ln1_g), ("ln1.beta", self.ln1_b)]
        out.extend((f"attn.{n}", p) for n, p in self.attn.parameters())
        out.extend([("ln2.gamma", self.ln2_g), ("ln2.beta", self.ln2_b)])
        prefix = "moe" if self.is_moe else "ffn"
        out.extend((f"{prefix}.{n}", p) for n, p in self.ffn.parameters())
        return out


@dataclass
class ForwardResult:
    logits: Tensor                                  # (B*T, V)
    gates: list[tuple[int, GateDecision]] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    valid_idx: np.ndarray | None = None             # rows of (B*T) holding real tokens


class LanguageModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        std = 1.0 / np.sqrt(d)
        self.tok_emb = Tensor(rng.normal(0.0, std, (config.vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, std, (config.max_seq_len, d)), requires_grad=True)
        self.blocks = [Block(config, i, rng) for i in range(config.n_layers)]
        self.lnf_g = Tensor(np.ones(d), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(d), requires_grad=True)
        self.head = Tensor(rng.normal(0.0, std, (d, config.vocab_size)), requires_grad=True)
        self._params = self._collect()

    def _collect(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            for name, p in blk.parameters():
                params[f"blocks.{i}.{name}"] = p
        params["lnf.gamma"] = self.lnf_g
        params["lnf.beta"] = self.lnf_b
        params["head"] = self.head
        return params

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def router_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if ".router." in n]

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def freeze(self, except_router: bool = False) -> None:
        for name, p in self.parameters():
            p.requires_grad = except_router and ".router." in name

    def unfreeze(self) -> None:
        for _, p in self.parameters():
            p.requires_grad = True

    def default_routing(self) -> RoutingMode:
        if self.config.moe is None:
            return AllExperts()
        return TopK(self.config.moe.top_k)

    def forward_batch(
        self,
        tokens: np.ndarray,           # (B, T) int, PAD on the tail
        valid: np.ndarray,            # (B, T) bool
        routing: RoutingMode | None = None,
        noisy: bool = False,
        rng: np.random.Generator | None = None,
        collect_gates: bool = False,
        collect_hidden: bool = False,
    ) -> ForwardResult:
        cfg = self.config
        if tokens.ndim != 2 or tokens.shape != valid.shape:
            raise ContractError("tokens and valid mask must both be (B, T)")
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise ContractError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ContractError("token id outside the vocabulary")
        if routing is None:
            routing = self.default_routing()

        flat_tokens = tokens.reshape(-1)
        flat_pos = np.tile(np.arange(t), b)
        x = T.gather_rows(self.tok_emb, flat_tokens) + T.gather_rows(self.pos_emb, flat_pos)
        causal = np.tril(np.ones((t, t), dtype=bool))
        valid_idx = np.nonzero(valid.reshape(-1))[0]

        result = ForwardResult(logits=x, valid_idx=valid_idx)  # placeholder, refilled below
        ordinal = 0
        for blk in self.blocks:
            x = x + blk.attn(T.layer_norm(x, blk.ln1_g, blk.ln1_b), b, t, causal)
            h = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
            if blk.is_moe:
                rows = T.gather_rows(h, valid_idx)
                y, decision = moe_forward(rows, blk.ffn, routing, noisy=noisy, rng=rng,
                                          ordinal=ordinal)
                ordinal += 1
                x = x + T.scatter_rows(y, valid_idx, b * t)
                if collect_gates:
                    result.gates.append((blk.index, decision))
            else:
                x = x + blk.ffn(h)
            if collect_hidden:
                result.hidden.append(x.data.copy())
        x = T.layer_norm(x, self.lnf_g, self.lnf_b)
        result.logits = T.matmul(x, self.head)
        return result

    def forward(
        self,
        tokens: Sequence[int],
        routing: RoutingMode | None = None,
        noisy: bool = False,
        rng: np.random.Generator | None = None,
        collect_gates: bool = False,
        collect_hidden: bool = False,
    ) -> ForwardResult:
        """Single-sequence forward: logits come back as (T, V)."""
        arr = np.asarray(tokens, dtype=np.int64)[None, :]
        valid = np.ones_like(arr, dtype=bool)
        res = self.forward_batch(arr, valid, routing, noisy, rng,
                                 collect_gates, collect_hidden)
        return res

    def log_distribution(
        self,
        tokens: Sequence[int],
        routing: RoutingMode | None = None,
    ) -> "TokenDistribution":
        res = self.forward(tokens, routing)
        return TokenDistribution(T.log_softmax(res.logits, axis=-1))

    def sample(
        self,
        prompt: Sequence[int],
        max_new: int,
        temperature: float = 1.0,
        top_k: int = 0,
        top_p: float = 1.0,
        rng: np.random.Generator | None = None,
        routing: RoutingMode | None = None,
    ) -> list[int]:
        """Autoregressive decoding; returns the new tokens, EOS excluded.

        temperature == 0 means greedy argmax; positive temperatures
        need an rng. top_k == 0 disables the top-k filter.
        """
        if temperature < 0:
            raise ContractError("temperature must be >= 0")
        if temperature > 0 and rng is None:
            raise ContractError("stochastic sampling needs an rng")
        if not 0.0 < top_p <= 1.0:
            raise ContractError("top_p must be in (0, 1]")
        seq = list(prompt)
        out: list[int] = []
        with no_grad():
            for _ in range(max_new):
                if len(seq) >= self.config.max_seq_len:
                    break
                logits = self.forward(seq, routing).logits.data[-1]
                nxt = _pick_token(logits, temperature, top_k, top_p, rng)
                if nxt == EOS:
                    break
                out.append(nxt)
                seq.append(nxt)
        return out


def _pick_token(logits: np.ndarray, temperature: float, top_k: int, top_p: float,
                rng: np.random.Generator | None) -> int:
    if temperature == 0:
        return int(np.argmax(logits))  # ties at lower index via argmax
    z = logits / temperature
    if top_k > 0 and top_k < z.size:
        cutoff = np.argsort(-z, kind="stable")[top_k:]
        z = z.copy()
        z[cutoff] = -np.inf
    p = np.exp(z - z.max())
    p = p / p.sum()
    if top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        keep_n = int(np.searchsorted(csum, top_p) + 1)
        drop = order[keep_n:]
        p = p.copy()
        p[drop] = 0.0
        p = p / p.sum()
    return int(rng.choice(p.size, p=p))


@dataclass
class TokenDistribution:
    """Per-position distributions carried as log-probabilities."""

    log_probs: Tensor  # (T, V)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)
