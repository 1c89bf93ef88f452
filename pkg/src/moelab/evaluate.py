"""ROUGE-L scoring and gate-probability diagnostics.

The three reports mirror the analysis that motivates router-aware
distillation: how much gate mass the activated experts actually carry
(per layer), how teacher/student quality moves as the expert count k
is swept, and how far SAR displaced the routing distribution.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import (
    EncodedExample,
    InstructionPair,
    decode_bytes,
    encode,
    make_prompt,
    pad_batch,
    shifted_response_labels,
)
from .distill import DistillConfig, run_distill
from .errors import ContractError
from .model import LanguageModel
from .moe import AllExperts, TopK
from .tensor import no_grad


def max_workers() -> int:
    """Worker cap for data-parallel evaluation, from MOELAB_THREADS."""
    raw = os.environ.get("MOELAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"MOELAB_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ContractError(f"MOELAB_THREADS must be >= 1, got {n}")
    return n


def _parallel_map(fn: Callable, items: Sequence) -> list:
    """Map preserving input order; MOELAB_THREADS > 1 fans out."""
    n = max_workers()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ROUGE-L -------------------------------------------------------------------


def lcs_len(a: Sequence, b: Sequence) -> int:
    """Length of the longest common subsequence, two-row DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> dict[str, float]:
    """LCS-based P/R and balanced F; 0 when either side is empty.

    Works on any token sequence — byte strings score at byte level."""
    lcs = lcs_len(candidate, reference)
    p = lcs / len(candidate) if candidate else 0.0
    r = lcs / len(reference) if reference else 0.0
    f = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f": f}


# generation + accuracy -----------------------------------------------------


def generate_greedy(model: LanguageModel, prompt: list[int],
                    max_new: int | None = None, routing=None) -> list[int]:
    cap = model.config.max_seq_len - len(prompt) - 1
    if max_new is None:
        max_new = cap
    return model.sample(prompt, min(max_new, cap), temperature=0.0, routing=routing)


def rouge_scores(model: LanguageModel, pairs: list[InstructionPair],
                 routing=None, max_new: int | None = None) -> list[float]:
    """Per-example ROUGE-L F of greedy generations (in pair order)."""
    max_seq = model.config.max_seq_len

    def score(pair: InstructionPair) -> float:
        prompt = make_prompt(pair.request, max_seq)
        out = generate_greedy(model, prompt, max_new, routing)
        return rouge_l(decode_bytes(out), pair.response)["f"]

    return _parallel_map(score, pairs)


def mean_rouge(model: LanguageModel, pairs: list[InstructionPair],
               routing=None, max_new: int | None = None) -> float:
    scores = rouge_scores(model, pairs, routing, max_new)
    return float(np.mean(scores)) if scores else 0.0


def response_token_accuracy(model: LanguageModel, encoded: list[EncodedExample],
                            batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over response positions."""
    hits = total = 0
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i : i + batch_size]
        tokens, valid, resp = pad_batch([e.tokens for e in chunk],
                                        [e.response_mask for e in chunk])
        targets, mask = shifted_response_labels(tokens, valid, resp)
        with no_grad():
            res = model.forward_batch(tokens, valid)
        pred = res.logits.data.argmax(axis=1)
        hits += int((pred[mask] == targets[mask]).sum())
        total += int(mask.sum())
    if total == 0:
        raise ContractError("no response positions to score")
    return hits / total


# gate-mass report ----------------------------------------------------------


@dataclass(frozen=True)
class LayerReport:
    layer: int
    activated_mass: float     # mean over response tokens of the full-softmax
    nonactivated_mass: float  # mass landing on the selected experts

    def __post_init__(self):
        if not 0.0 <= self.activated_mass <= 1.0 + 1e-9:
            raise ContractError(f"activated mass {self.activated_mass} outside [0,1]")
        if abs(self.activated_mass + self.nonactivated_mass - 1.0) > 1e-9:
            raise ContractError("activated and non-activated masses must sum to 1")


def activated_mass_report(teacher: LanguageModel, pairs: list[InstructionPair],
                          k: int | None = None, batch_size: int = 32) -> list[LayerReport]:
    """Per MoE layer: how much of the full gate softmax the selected
    experts carry, averaged over response-token positions, noise off."""
    if teacher.config.moe is None:
        raise ContractError("activated_mass_report needs a MoE model")
    routing = TopK(k) if k is not None else teacher.default_routing()
    encoded = [encode(p, teacher.config.max_seq_len) for p in pairs]
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i : i + batch_size]
        tokens, valid, resp = pad_batch([e.tokens for e in chunk],
                                        [e.response_mask for e in chunk])
        with no_grad():
            res = teacher.forward_batch(tokens, valid, routing, collect_gates=True)
        resp_rows = resp.reshape(-1)[res.valid_idx]  # gate rows hold valid tokens only
        for layer, dec in res.gates:
            full = dec.full_softmax()
            mass = np.take_along_axis(full, dec.selected, axis=1).sum(axis=1)
            sums[layer] = sums.get(layer, 0.0) + float(mass[resp_rows].sum())
            counts[layer] = counts.get(layer, 0) + int(resp_rows.sum())
    reports = []
    for layer in sorted(sums):
        if counts[layer] == 0:
            raise ContractError("no response tokens reached the MoE layers")
        mean = sums[layer] / counts[layer]
        reports.append(LayerReport(layer, mean, 1.0 - mean))
    return reports


# k sweep -------------------------------------------------------------------


def k_sweep(teacher: LanguageModel, student_ctor: Callable[[], LanguageModel],
            train_pairs: list[InstructionPair], test_pairs: list[InstructionPair],
            ks: Sequence[int], cfg: DistillConfig, seed: int) -> list[dict]:
    """One row per k: teacher greedy quality with k experts, and the test
    score of a fresh student distilled against that k-expert teacher."""
    if teacher.config.moe is None:
        raise ContractError("k_sweep needs a MoE teacher")
    n = teacher.config.moe.n_experts
    rows = []
    for k in ks:
        if not 1 <= k <= n:
            raise ContractError(f"k={k} outside 1..{n}")
        teacher_score = mean_rouge(teacher, test_pairs, routing=TopK(k))
        cfg_k = replace(cfg, teacher_k=k,
                        ka_expert_count=k if cfg.method == "ka" else cfg.ka_expert_count)
        student = student_ctor()
        run_distill(cfg.method, teacher, student, train_pairs, cfg_k, seed)
        student_score = mean_rouge(student, test_pairs)
        rows.append({"k": k, "teacher_rouge_l": teacher_score,
                     "student_rouge_l": student_score})
    return rows


# router shift --------------------------------------------------------------


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def router_shift_report(before: LanguageModel, after: LanguageModel,
                        pairs: list[InstructionPair], batch_size: int = 32) -> list[dict]:
    """Per layer, D_KL(gates_before || gates_after) over the full expert
    softmax, aggregated over every valid token position, noise off."""
    for model in (before, after):
        if model.config.moe is None:
            raise ContractError("router_shift_report needs MoE models")
    if before.config.to_dict() != after.config.to_dict():
        raise ContractError("router shift requires architecturally identical models")
    max_seq = before.config.max_seq_len
    encoded = [encode(p, max_seq) for p in pairs]
    sums: dict[int, float] = {}
    maxes: dict[int, float] = {}
    counts: dict[int, int] = {}
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i : i + batch_size]
        tokens, valid, _ = pad_batch([e.tokens for e in chunk],
                                     [e.response_mask for e in chunk])
        with no_grad():
            res_b = before.forward_batch(tokens, valid, AllExperts(), collect_gates=True)
            res_a = after.forward_batch(tokens, valid, AllExperts(), collect_gates=True)
        for (layer, dec_b), (layer_a, dec_a) in zip(res_b.gates, res_a.gates):
            if layer != layer_a:
                raise ContractError("MoE layer sets differ between the two models")
            lp = _log_softmax_rows(dec_b.logits)   # log space: stays finite even
            lq = _log_softmax_rows(dec_a.logits)   # when a gate prob underflows
            kl = np.maximum((np.exp(lp) * (lp - lq)).sum(axis=1), 0.0)
            sums[layer] = sums.get(layer, 0.0) + float(kl.sum())
            maxes[layer] = max(maxes.get(layer, 0.0), float(kl.max()))
            counts[layer] = counts.get(layer, 0) + kl.size
    return [{"layer": layer, "mean_kl": sums[layer] / counts[layer],
             "max_kl": maxes[layer]} for layer in sorted(sums)]
