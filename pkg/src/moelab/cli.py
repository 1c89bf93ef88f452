"""Command-line front end.

    moelab pretrain --config desk.ini --out runs/a
    moelab distill  --config desk.ini --method ka --out runs/a
    moelab analyze gate-mass|router-shift|k-sweep ...
    moelab eval CKPT [CKPT ...] --config desk.ini
    moelab sweep --param lambda --values 0,0.05,0.2

Every run writes its artifacts under --out: checkpoints, append-only
JSON-lines metrics (wall times split into timings.jsonl), CSV+JSON
reports, and a PNG rendering next to each report. A lock file keeps
concurrent runs out of the same directory. Exit codes: 0 ok, 2 config,
3 I/O, 4 contract violation, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import figures
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_flags, load_config
from .data import encode, gen_mixture, load_jsonl, split_dataset
from .distill import run_distill, run_pretrain
from .errors import EXIT_OK, ContractError, MoelabError, exit_code_for
from .evaluate import (
    activated_mass_report,
    k_sweep,
    mean_rouge,
    response_token_accuracy,
    rouge_scores,
    router_shift_report,
)
from .metrics import (
    OutputLock,
    provenance,
    write_metrics,
    write_report_csv,
    write_report_json,
)
from .model import LanguageModel
from .optim import hyperparams
from .seeding import substream


def _dataset(cfg: RunConfig):
    d = cfg.values["data"]
    rng = substream(cfg.seed, "dataset")
    if d["source"] == "jsonl":
        pairs = load_jsonl(d["jsonl_path"])
        if len(pairs) < 3:
            raise ContractError(f"{d['jsonl_path']}: too few rows to split")
    else:
        pairs = gen_mixture(list(d["tasks"]), d["n_pairs"], rng,
                            d["min_len"], d["max_len"])
    return split_dataset(pairs, rng)


def _meta(cfg: RunConfig, **extra) -> dict:
    meta = provenance(cfg.config_hash(), cfg.seed)
    meta.update(extra)
    return meta


def _save_config_snapshot(cfg: RunConfig) -> None:
    path = cfg.out_dir / "config.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_ini(), encoding="utf-8")


def cmd_pretrain(args) -> None:
    cfg = apply_flags(load_config(args.config), args)
    pcfg = cfg.pretrain_config()
    train, val, _ = _dataset(cfg)
    with OutputLock(cfg.out_dir):
        _save_config_snapshot(cfg)
        teacher = LanguageModel(cfg.teacher_model_config(),
                                substream(cfg.seed, "init_teacher"))
        result = run_pretrain(teacher, train, pcfg, cfg.seed)
        save_checkpoint(cfg.out_dir / "teacher.ckpt", teacher,
                        _meta(cfg, role="teacher"))
        write_metrics(
            cfg.out_dir, result.metrics,
            _meta(cfg, phase="pretrain",
                  optimizer=hyperparams(pcfg.weight_decay, lr=pcfg.lr)),
            name="metrics_pretrain")
        figures.fig_loss_curve(result.metrics, cfg.out_dir / "pretrain_loss.png")
        acc = response_token_accuracy(
            teacher, [encode(p, teacher.config.max_seq_len) for p in val])
        print(f"teacher: {result.student_updates} updates, "
              f"final loss {result.metrics[-1]['loss']:.4f}, "
              f"val response-token accuracy {acc:.4f}")
        print(f"wrote {cfg.out_dir / 'teacher.ckpt'}")


def cmd_distill(args) -> None:
    cfg = apply_flags(load_config(args.config), args)
    dcfg = cfg.distill_config()
    train, _, _ = _dataset(cfg)
    teacher = None
    if dcfg.method != "sft":
        teacher, _ = load_checkpoint(cfg.teacher_ckpt)
    with OutputLock(cfg.out_dir):
        _save_config_snapshot(cfg)
        student = LanguageModel(cfg.student_model_config(),
                                substream(cfg.seed, "init_student"))
        result = run_distill(dcfg.method, teacher, student, train, dcfg, cfg.seed)
        save_checkpoint(cfg.out_dir / f"student_{dcfg.method}.ckpt", student,
                        _meta(cfg, role="student", method=dcfg.method))
        if result.teacher is not None:
            save_checkpoint(cfg.out_dir / "teacher_sar.ckpt", result.teacher,
                            _meta(cfg, role="teacher", method="sar"))
        lrs = {"lr_student": dcfg.lr_student}
        if dcfg.method == "sar":
            lrs["lr_router"] = dcfg.lr_router
        write_metrics(cfg.out_dir, result.metrics,
                      _meta(cfg, phase="distill", method=dcfg.method,
                            optimizer=hyperparams(dcfg.weight_decay, **lrs)),
                      name=f"metrics_{dcfg.method}")
        figures.fig_loss_curve(result.metrics,
                               cfg.out_dir / f"distill_{dcfg.method}_loss.png")
        print(f"{dcfg.method}: {result.student_updates} student updates, "
              f"loss {result.metrics[0]['loss']:.4f} -> {result.metrics[-1]['loss']:.4f}")
        print(f"wrote {cfg.out_dir / f'student_{dcfg.method}.ckpt'}")


def _report(cfg: RunConfig, stem: str, rows: list[dict], fig_fn, **extra) -> None:
    prov = provenance(cfg.config_hash(), cfg.seed)
    prov.update(extra)
    write_report_csv(cfg.out_dir / f"{stem}.csv", rows, prov)
    write_report_json(cfg.out_dir / f"{stem}.json", rows, prov)
    fig_fn(rows, cfg.out_dir / f"{stem}.png")
    print(f"wrote {cfg.out_dir / f'{stem}.csv'} (+ .json, .png)")


def cmd_analyze(args) -> None:
    cfg = apply_flags(load_config(args.config), args)
    train, _, test = _dataset(cfg)
    teacher, _ = load_checkpoint(cfg.teacher_ckpt)
    with OutputLock(cfg.out_dir):
        if args.kind == "gate-mass":
            reports = activated_mass_report(teacher, test, k=args.k)
            rows = [{"layer": r.layer, "activated_mass": r.activated_mass,
                     "nonactivated_mass": r.nonactivated_mass} for r in reports]
            _report(cfg, "gate_mass", rows, figures.fig_gate_mass,
                    averaged_over="response_tokens")
        elif args.kind == "router-shift":
            after_path = args.after or cfg.out_dir / "teacher_sar.ckpt"
            after, _ = load_checkpoint(after_path)
            rows = router_shift_report(teacher, after, test)
            _report(cfg, "router_shift", rows, figures.fig_router_shift)
        else:  # k-sweep
            ks = [int(v) for v in args.ks.split(",") if v.strip()]
            student_cfg = cfg.student_model_config()
            seed = cfg.seed

            def fresh_student() -> LanguageModel:
                return LanguageModel(student_cfg, substream(seed, "init_student"))

            rows = k_sweep(teacher, fresh_student, train, test, ks,
                           cfg.distill_config(), seed)
            _report(cfg, "k_sweep", rows, figures.fig_k_sweep)


def cmd_eval(args) -> None:
    cfg = apply_flags(load_config(args.config), args)
    _, _, test = _dataset(cfg)
    if not test:
        raise ContractError("empty test set")
    per_ckpt = []
    all_scores: list[float] = []
    for ckpt in args.ckpts:
        model, _ = load_checkpoint(ckpt)
        scores = rouge_scores(model, test)
        per_ckpt.append({"checkpoint": str(ckpt),
                         "mean_f": float(sum(scores) / len(scores)),
                         "scores": scores})
        all_scores.extend(scores)
    aggregate = float(sum(c["mean_f"] for c in per_ckpt) / len(per_ckpt))
    with OutputLock(cfg.out_dir):
        prov = provenance(cfg.config_hash(), cfg.seed)
        write_report_json(cfg.out_dir / "eval.json",
                          [{"aggregate_mean_f": aggregate, "checkpoints": per_ckpt}],
                          prov)
        csv_rows = [{"checkpoint": c["checkpoint"], "example": i, "f": s}
                    for c in per_ckpt for i, s in enumerate(c["scores"])]
        write_report_csv(cfg.out_dir / "eval.csv", csv_rows, prov)
        figures.fig_score_hist(all_scores, cfg.out_dir / "eval.png")
    for c in per_ckpt:
        print(f"{c['checkpoint']}: mean ROUGE-L F = {c['mean_f']:.4f} "
              f"({len(c['scores'])} examples)")
    print(f"aggregate over {len(per_ckpt)} checkpoint(s): {aggregate:.4f}")
    print(f"wrote {cfg.out_dir / 'eval.json'} (+ .csv, .png)")


_SWEEPABLE = {
    "lambda": ("lam", float),
    "M": ("m_inner", int),
    "beta": ("beta", float),
    "seed": (None, int),
}


def cmd_sweep(args) -> None:
    cfg = apply_flags(load_config(args.config), args)
    field, cast = _SWEEPABLE[args.param]
    values = [cast(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ContractError("sweep needs at least one value")
    dcfg = cfg.distill_config()
    train, _, test = _dataset(cfg)
    teacher = None
    if dcfg.method != "sft":
        teacher, _ = load_checkpoint(cfg.teacher_ckpt)
    with OutputLock(cfg.out_dir):
        _save_config_snapshot(cfg)
        rows = []
        for value in values:
            run_cfg = dcfg if field is None else replace(dcfg, **{field: value})
            seed = value if args.param == "seed" else cfg.seed
            student = LanguageModel(cfg.student_model_config(),
                                    substream(seed, "init_student"))
            result = run_distill(run_cfg.method, teacher, student, train, run_cfg, seed)
            score = mean_rouge(student, test)
            rows.append({args.param: value, "rouge_l": score,
                         "final_loss": result.metrics[-1]["loss"]})
            print(f"{args.param}={value}: rouge_l={score:.4f}")
        prov = provenance(cfg.config_hash(), cfg.seed)
        write_report_csv(cfg.out_dir / "sweep.csv", rows, prov)
        write_report_json(cfg.out_dir / "sweep.json", rows, prov)
        figures.fig_sweep(args.param, rows, cfg.out_dir / "sweep.png")
        print(f"wrote {cfg.out_dir / 'sweep.csv'} (+ .json, .png)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Distillation lab for MoE teachers and dense students.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--teacher", default=None, help="teacher checkpoint path")
        p.add_argument("--method", default=None,
                       help="sft | kd | gkd | all | ka | sar")
        p.add_argument("--lambda", dest="lam", type=float, default=None,
                       help="expert-set sampling probability")
        p.add_argument("--M", dest="m_inner", type=int, default=None,
                       help="teacher views per sampled response")
        p.add_argument("--beta", type=float, default=None,
                       help="load-balance weight in the router objective")
        p.add_argument("--k", type=int, default=None,
                       help="teacher expert count override")

    p = sub.add_parser("pretrain", help="train the MoE teacher")
    common(p)

    p = sub.add_parser("distill", help="distill into a dense student")
    common(p)

    p = sub.add_parser("analyze", help="gate and router diagnostics")
    p.add_argument("kind", choices=["gate-mass", "router-shift", "k-sweep"])
    common(p)
    p.add_argument("--after", default=None,
                   help="adapted-router checkpoint (router-shift)")
    p.add_argument("--ks", default="1,2,4,8",
                   help="comma-separated k values (k-sweep)")

    p = sub.add_parser("eval", help="greedy ROUGE-L over the test split")
    p.add_argument("ckpts", nargs="+", metavar="CKPT",
                   help="student checkpoint(s); several average across seeds")
    common(p)

    p = sub.add_parser("sweep", help="re-run distillation across a parameter")
    common(p)
    p.add_argument("--param", choices=sorted(_SWEEPABLE), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")

    return parser


_HANDLERS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _HANDLERS[args.command](args)
    except (MoelabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
