"""Matplotlib renders for each report the CLI emits.

Every function writes one PNG next to the CSV/JSON it illustrates.
Rendering is headless (Agg) and takes the already-serialized rows, so
figures always agree with the delimited output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _finish(fig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def fig_gate_mass(rows: list[dict], path: str | Path) -> None:
    """Stacked activated/non-activated gate mass per MoE layer."""
    layers = [str(r["layer"]) for r in rows]
    act = [r["activated_mass"] for r in rows]
    non = [r["nonactivated_mass"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(layers, act, label="activated", color="#4878cf")
    ax.bar(layers, non, bottom=act, label="non-activated", color="#d65f5f")
    ax.axhline(0.5, color="black", lw=0.8, ls="--")
    ax.set_xlabel("MoE layer")
    ax.set_ylabel("gate probability mass")
    ax.set_ylim(0, 1)
    ax.legend(loc="upper right", fontsize=8)
    _finish(fig, path)


def fig_router_shift(rows: list[dict], path: str | Path) -> None:
    layers = [r["layer"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(layers, [r["mean_kl"] for r in rows], "o-", label="mean KL")
    ax.plot(layers, [r["max_kl"] for r in rows], "s--", label="max KL")
    ax.set_xlabel("MoE layer")
    ax.set_ylabel("KL(before ‖ after)")
    ax.set_xticks(layers)
    ax.legend(fontsize=8)
    _finish(fig, path)


def fig_k_sweep(rows: list[dict], path: str | Path) -> None:
    ks = [r["k"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ks, [r["teacher_rouge_l"] for r in rows], "o-", label="teacher")
    ax.plot(ks, [r["student_rouge_l"] for r in rows], "s--", label="student")
    ax.set_xlabel("activated experts k")
    ax.set_ylabel("ROUGE-L (F)")
    ax.set_xticks(ks)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    _finish(fig, path)


def fig_score_hist(scores: list[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(scores, bins=20, range=(0, 1), color="#4878cf", edgecolor="white")
    ax.set_xlabel("ROUGE-L (F)")
    ax.set_ylabel("examples")
    _finish(fig, path)


def fig_sweep(param: str, rows: list[dict], path: str | Path) -> None:
    xs = [r[param] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, [r["rouge_l"] for r in rows], "o-")
    ax.set_xlabel(param)
    ax.set_ylabel("ROUGE-L (F)")
    ax.set_ylim(0, 1.02)
    _finish(fig, path)


def fig_loss_curve(rows: list[dict], path: str | Path) -> None:
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, [r["loss"] for r in rows], lw=0.9)
    ax.set_xlabel("student update")
    ax.set_ylabel("loss")
    _finish(fig, path)
