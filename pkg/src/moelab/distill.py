"""Distillation objectives and training loops.

Six ways to move a MoE teacher into a dense student:

- sft: cross-entropy on golden responses, no teacher.
- kd:  forward KL against the teacher on golden responses.
- gkd: reverse KL against the teacher on student-sampled responses.
- all: gkd with every expert active in the teacher.
- ka:  gkd against randomized near-full expert subsets, several teacher
       views (and student updates) per sampled response.
- sar: alternates a router update (teacher side) with a student update,
       so the teacher's gating adapts to the student it is teaching.

Randomness is split into named substreams (data order, decoding,
expert-set sampling, router noise); keeping them independent is what
makes the reduction checks (ka -> gkd, sar -> all) exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (
    EOS,
    EncodedExample,
    InstructionPair,
    encode,
    make_prompt,
    pad_batch,
    shifted_response_labels,
)
from .errors import ContractError
from .model import LanguageModel, TokenDistribution
from .moe import (
    AllExperts,
    ExpertLoad,
    SampledSets,
    TopK,
    load_balance_loss,
    load_from_decision,
)
from .optim import AdamW
from .seeding import substream
from .tensor import Tensor, no_grad

METHODS = ("sft", "kd", "gkd", "all", "ka", "sar")


@dataclass(frozen=True)
class DistillConfig:
    method: str = "kd"
    lam: float = 0.05            # chance an expert set is sampled rather than top-(count)
    m_inner: int = 2             # student updates per sampled response (ka)
    beta: float = 0.01           # load-balance weight inside the router objective
    sar_kl_direction: str = "forward"  # which way the router KL points; "forward" is the written objective
    lr_student: float = 1e-5
    lr_router: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 16
    ka_expert_count: int | None = None  # defaults to N-1
    teacher_k: int | None = None        # override the teacher's top-k for kd/gkd
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    max_new: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must be in [0,1], got {self.lam}")
        if self.m_inner < 1:
            raise ContractError("M must be >= 1")
        if self.beta < 0:
            raise ContractError("beta must be >= 0")
        if self.sar_kl_direction not in ("forward", "reverse"):
            raise ContractError("sar_kl_direction must be 'forward' or 'reverse'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 0.01
    aux_coeff: float = 0.01   # weight of the load-balance term
    noisy: bool = True        # gate noise stays on while the teacher trains


@dataclass
class RunResult:
    student: LanguageModel
    metrics: list[dict] = field(default_factory=list)
    outer_steps: int = 0
    student_updates: int = 0
    teacher: LanguageModel | None = None


# objectives ---------------------------------------------------------------


def _masked_kl(log_a: Tensor, log_b: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if log_a.shape != log_b.shape:
        raise ContractError(f"distribution shapes differ: {log_a.shape} vs {log_b.shape}")
    if mask.shape != (log_a.shape[0],):
        raise ContractError("mask length must match the number of positions")
    rows = np.nonzero(mask)[0]
    if rows.size == 0:
        raise ContractError("KL over an empty mask")
    return T.tmean(T.gather_rows(T.kl_div_rowsum(log_a, log_b), rows))


def forward_kl(p: TokenDistribution, q: TokenDistribution, mask) -> Tensor:
    """Mean over masked positions of sum_v p * (log p - log q).

    p is the reference (teacher) side; gradients normally arrive
    through q."""
    return _masked_kl(p.log_probs, q.log_probs, mask)


def reverse_kl(q: TokenDistribution, p: TokenDistribution, mask) -> Tensor:
    """forward_kl with the roles swapped: sum_v q * (log q - log p),
    the mode-seeking direction used on student-sampled responses."""
    return _masked_kl(q.log_probs, p.log_probs, mask)


def sar_loss(
    teacher_dist: TokenDistribution,
    student_dist: TokenDistribution,
    loads: ExpertLoad | list[ExpertLoad],
    beta: float,
    mask,
    direction: str = "forward",
) -> Tensor:
    """Router objective: KL(teacher, student) + beta * load balance.

    The student distribution is treated as a constant here — only the
    teacher side (through its router) should carry gradient."""
    if direction == "forward":
        kl = _masked_kl(teacher_dist.log_probs, student_dist.log_probs, mask)
    elif direction == "reverse":
        kl = _masked_kl(student_dist.log_probs, teacher_dist.log_probs, mask)
    else:
        raise ContractError("direction must be 'forward' or 'reverse'")
    if isinstance(loads, ExpertLoad):
        loads = [loads]
    lb: Tensor | None = None
    for load in loads:
        term = load_balance_loss(load)
        lb = term if lb is None else lb + term
    if lb is None:
        raise ContractError("sar_loss needs at least one expert load")
    return kl + lb * beta


# expert-set sampling -------------------------------------------------------


def ka_select(gate_probs_full, lam: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Pick `count` distinct experts for one token.

    With probability lam, draw sequentially without replacement,
    weighted by the full gate distribution; otherwise take the top
    `count` (ties to the lower index — prob order equals logit order).
    """
    p = np.asarray(gate_probs_full, dtype=np.float64)
    n = p.size
    if not 1 <= count <= n:
        raise ContractError(f"count={count} outside 1..{n}")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0,1], got {lam}")
    if rng.random() < lam:
        w = p.copy()
        chosen = np.empty(count, dtype=np.intp)
        for j in range(count):
            total = w.sum()
            if total <= 0:
                raise ContractError("degenerate gate distribution in ka_select")
            chosen[j] = rng.choice(n, p=w / total)
            w[chosen[j]] = 0.0
        return chosen
    return np.argsort(-p, kind="stable")[:count]


def ka_select_batch(full_probs: np.ndarray, lam: float, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    return np.stack([ka_select(row, lam, count, rng) for row in full_probs])


# batch plumbing ------------------------------------------------------------


def _golden_batch(encoded: list[EncodedExample], idx: np.ndarray):
    return pad_batch([encoded[i].tokens for i in idx],
                     [encoded[i].response_mask for i in idx])


def _sampled_batch(student: LanguageModel, pairs: list[InstructionPair], idx: np.ndarray,
                   cfg: DistillConfig, max_seq: int, rng: np.random.Generator):
    """Student-decoded pseudo-targets, laid out like golden examples."""
    seqs, masks = [], []
    for i in idx:
        prompt = make_prompt(pairs[i].request, max_seq)
        cap = max_seq - len(prompt) - 1
        max_new = cap if cfg.max_new is None else min(cfg.max_new, cap)
        y = student.sample(prompt, max_new, cfg.temperature, cfg.top_k, cfg.top_p, rng)
        seqs.append(np.array(prompt + y + [EOS], dtype=np.int64))
        masks.append(np.array([False] * len(prompt) + [True] * (len(y) + 1)))
    return pad_batch(seqs, masks)


def _batches(n: int, cfg_epochs: int, batch_size: int, rng: np.random.Generator):
    for _ in range(cfg_epochs):
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i : i + batch_size]


def _log_dist(model: LanguageModel, tokens, valid, routing=None, **kw) -> tuple[Tensor, "object"]:
    res = model.forward_batch(tokens, valid, routing, **kw)
    return T.log_softmax(res.logits, axis=-1), res


def _shared_max_seq(teacher: LanguageModel | None, student: LanguageModel) -> int:
    if teacher is None:
        return student.config.max_seq_len
    return min(teacher.config.max_seq_len, student.config.max_seq_len)


def _check_compatible(teacher: LanguageModel, student: LanguageModel, method: str) -> None:
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ContractError("teacher and student vocabularies differ")
    if method in ("all", "ka", "sar") and teacher.config.moe is None:
        raise ContractError(f"method {method!r} needs a MoE teacher")


def _record(metrics: list[dict], step: int, method: str, loss: float, kl: float | None,
            lb: float | None, rgn: float | None, wall_ms: float) -> None:
    metrics.append({
        "step": step, "method": method, "loss": loss, "kl": kl,
        "lb_loss": lb, "router_grad_norm": rgn, "wall_ms": wall_ms,
    })


# training loops ------------------------------------------------------------


def run_pretrain(model: LanguageModel, pairs: list[InstructionPair],
                 cfg: PretrainConfig, seed: int, method_tag: str = "pretrain") -> RunResult:
    """Next-token training on golden pairs; MoE models also carry the
    load-balance term and (by default) gate noise."""
    rng_order = substream(seed, "data_order")
    rng_noise = substream(seed, "noise")
    encoded = [encode(p, model.config.max_seq_len) for p in pairs]
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = RunResult(student=model)
    is_moe = model.config.moe is not None
    for idx in _batches(len(encoded), cfg.epochs, cfg.batch_size, rng_order):
        t0 = time.perf_counter()
        tokens, valid, resp = _golden_batch(encoded, idx)
        targets, loss_mask = shifted_response_labels(tokens, valid, resp)
        res = model.forward_batch(tokens, valid, noisy=cfg.noisy and is_moe,
                                  rng=rng_noise, collect_gates=is_moe)
        ce = T.cross_entropy_masked(res.logits, targets, loss_mask)
        lb_val = None
        loss = ce
        if is_moe and cfg.aux_coeff > 0:
            lb: Tensor | None = None
            for _, dec in res.gates:
                term = load_balance_loss(load_from_decision(dec))
                lb = term if lb is None else lb + term
            loss = ce + lb * cfg.aux_coeff
            lb_val = lb.item()
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        result.outer_steps += 1
        result.student_updates += 1
        _record(result.metrics, result.student_updates, method_tag, loss.item(),
                None, lb_val, None, (time.perf_counter() - t0) * 1e3)
    return result


def run_baseline(method: str, teacher: LanguageModel | None, student: LanguageModel,
                 pairs: list[InstructionPair], cfg: DistillConfig, seed: int) -> RunResult:
    """sft / kd / gkd / all. The teacher (when present) is frozen."""
    if method not in ("sft", "kd", "gkd", "all"):
        raise ContractError(f"run_baseline does not handle {method!r}")
    if method != "sft":
        if teacher is None:
            raise ContractError(f"method {method!r} needs a teacher")
        _check_compatible(teacher, student, method)
        teacher.freeze()
    rng_order = substream(seed, "data_order")
    rng_sample = substream(seed, "sampling")
    max_seq = _shared_max_seq(teacher, student)
    encoded = [encode(p, max_seq) for p in pairs]
    opt = AdamW(student.parameters(), lr=cfg.lr_student, weight_decay=cfg.weight_decay)
    result = RunResult(student=student)

    if method == "all":
        routing = AllExperts()
    elif method in ("kd", "gkd") and teacher is not None and teacher.config.moe is not None:
        routing = TopK(cfg.teacher_k or teacher.config.moe.top_k)
    else:
        routing = None

    for idx in _batches(len(pairs), cfg.epochs, cfg.batch_size, rng_order):
        t0 = time.perf_counter()
        if method in ("sft", "kd"):
            tokens, valid, resp = _golden_batch(encoded, idx)
        else:
            tokens, valid, resp = _sampled_batch(student, pairs, idx, cfg, max_seq, rng_sample)
        targets, loss_mask = shifted_response_labels(tokens, valid, resp)

        if method == "sft":
            res = student.forward_batch(tokens, valid)
            loss = T.cross_entropy_masked(res.logits, targets, loss_mask)
            kl_val = None
        else:
            with no_grad():
                log_p, _ = _log_dist(teacher, tokens, valid, routing)
            log_q, _ = _log_dist(student, tokens, valid)
            if method == "kd":
                loss = _masked_kl(log_p, log_q, loss_mask)   # teacher-led, golden targets
            else:
                loss = _masked_kl(log_q, log_p, loss_mask)   # student-led, sampled targets
            kl_val = loss.item()
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        result.outer_steps += 1
        result.student_updates += 1
        _record(result.metrics, result.student_updates, method, loss.item(),
                kl_val, None, None, (time.perf_counter() - t0) * 1e3)
    return result


def run_ka(teacher: LanguageModel, student: LanguageModel, pairs: list[InstructionPair],
           cfg: DistillConfig, seed: int) -> RunResult:
    """Knowledge augmentation: per sampled response, M teacher views under
    fresh randomized (N-1)-expert sets, one student update per view."""
    _check_compatible(teacher, student, "ka")
    teacher.freeze()
    n_experts = teacher.config.moe.n_experts
    count = cfg.ka_expert_count if cfg.ka_expert_count is not None else n_experts - 1
    if not 1 <= count <= n_experts:
        raise ContractError(f"ka_expert_count={count} outside 1..{n_experts}")
    rng_order = substream(seed, "data_order")
    rng_sample = substream(seed, "sampling")
    rng_ka = substream(seed, "ka")
    max_seq = _shared_max_seq(teacher, student)
    opt = AdamW(student.parameters(), lr=cfg.lr_student, weight_decay=cfg.weight_decay)
    result = RunResult(student=student)
    mode = SampledSets(lambda ordinal, probs: ka_select_batch(probs, cfg.lam, count, rng_ka))

    for idx in _batches(len(pairs), cfg.epochs, cfg.batch_size, rng_order):
        tokens, valid, resp = _sampled_batch(student, pairs, idx, cfg, max_seq, rng_sample)
        _, loss_mask = shifted_response_labels(tokens, valid, resp)
        for _ in range(cfg.m_inner):
            t0 = time.perf_counter()
            with no_grad():
                log_p, _ = _log_dist(teacher, tokens, valid, mode)  # fresh sets every pass
            log_q, _ = _log_dist(student, tokens, valid)
            loss = _masked_kl(log_q, log_p, loss_mask)
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            result.student_updates += 1
            _record(result.metrics, result.student_updates, "ka", loss.item(),
                    loss.item(), None, None, (time.perf_counter() - t0) * 1e3)
        result.outer_steps += 1
    return result


def run_sar(teacher: LanguageModel, student: LanguageModel, pairs: list[InstructionPair],
            cfg: DistillConfig, seed: int) -> RunResult:
    """Student-aware router: stage 1 nudges W_g/W_noise toward the student
    (all other teacher weights frozen), stage 2 is an all-expert student
    update. The returned teacher carries the adapted router."""
    _check_compatible(teacher, student, "sar")
    teacher.freeze(except_router=True)
    rng_order = substream(seed, "data_order")
    rng_sample = substream(seed, "sampling")
    rng_noise = substream(seed, "noise")
    max_seq = _shared_max_seq(teacher, student)
    router_params = teacher.router_parameters()
    # W_g entries precede W_noise per layer, preserving the update order
    opt_router = AdamW(router_params, lr=cfg.lr_router, weight_decay=cfg.weight_decay)
    opt_student = AdamW(student.parameters(), lr=cfg.lr_student, weight_decay=cfg.weight_decay)
    result = RunResult(student=student, teacher=teacher)

    for idx in _batches(len(pairs), cfg.epochs, cfg.batch_size, rng_order):
        t0 = time.perf_counter()
        tokens, valid, resp = _sampled_batch(student, pairs, idx, cfg, max_seq, rng_sample)
        _, loss_mask = shifted_response_labels(tokens, valid, resp)

        # stage 1: router step against a constant student distribution
        with no_grad():
            log_q_const, _ = _log_dist(student, tokens, valid)
        log_p, res = _log_dist(teacher, tokens, valid, AllExperts(),
                               noisy=True, rng=rng_noise, collect_gates=True)
        loads = [load_from_decision(dec) for _, dec in res.gates]
        loss_router = sar_loss(TokenDistribution(log_p), TokenDistribution(log_q_const),
                               loads, cfg.beta, loss_mask, cfg.sar_kl_direction)
        T.backward(loss_router)
        rgn = opt_router.grad_norm()
        opt_router.step()
        opt_router.zero_grad()
        kl_val = loss_router.item()
        lb_val = sum(load_balance_loss(ld).item() for ld in loads)

        # stage 2: student step against the adapted, noise-free teacher
        with no_grad():
            log_p2, _ = _log_dist(teacher, tokens, valid, AllExperts())
        log_q, _ = _log_dist(student, tokens, valid)
        loss_student = _masked_kl(log_q, log_p2, loss_mask)
        T.backward(loss_student)
        opt_student.step()
        opt_student.zero_grad()

        result.outer_steps += 1
        result.student_updates += 1
        _record(result.metrics, result.student_updates, "sar", loss_student.item(),
                kl_val, lb_val, rgn, (time.perf_counter() - t0) * 1e3)
    return result


def sar_holdout_loss(teacher: LanguageModel, student: LanguageModel,
                     encoded: list[EncodedExample], cfg: DistillConfig) -> float:
    """The router objective on a fixed batch, deterministically (noise off,
    all experts, no gradients) — used to track router progress."""
    tokens, valid, resp = pad_batch([e.tokens for e in encoded],
                                     [e.response_mask for e in encoded])
    _, loss_mask = shifted_response_labels(tokens, valid, resp)
    with no_grad():
        log_p, res = _log_dist(teacher, tokens, valid, AllExperts(), collect_gates=True)
        log_q, _ = _log_dist(student, tokens, valid)
        loads = [load_from_decision(dec) for _, dec in res.gates]
        loss = sar_loss(TokenDistribution(log_p), TokenDistribution(log_q),
                        loads, cfg.beta, loss_mask, cfg.sar_kl_direction)
    return loss.item()


def run_distill(method: str, teacher: LanguageModel | None, student: LanguageModel,
                pairs: list[InstructionPair], cfg: DistillConfig, seed: int) -> RunResult:
    if method in ("sft", "kd", "gkd", "all"):
        return run_baseline(method, teacher, student, pairs, cfg, seed)
    if teacher is None:
        raise ContractError(f"method {method!r} needs a teacher")
    if method == "ka":
        return run_ka(teacher, student, pairs, cfg, seed)
    if method == "sar":
        return run_sar(teacher, student, pairs, cfg, seed)
    raise ContractError(f"unknown method {method!r}")
