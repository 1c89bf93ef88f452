"""Run configuration: INI files with typed sections, flag overrides, and
a content hash for provenance.

The file format is a flat key-value text file with sections — diffable
and easy to commit next to results. Command-line flags always win over
file values. Unknown sections or keys are rejected outright so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import TASKS
from .distill import METHODS, DistillConfig, PretrainConfig
from .errors import ConfigError, ContractError
from .model import ModelConfig, MoESpec

# schema: section -> key -> (type tag, default). "opt_int"/"opt_str" allow
# an empty value meaning None. Production-scale training values stay the
# DistillConfig defaults; this file carries the desk-scale experiment.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "out": ("str", "runs/default"),
        "teacher_ckpt": ("opt_str", None),   # defaults to <out>/teacher.ckpt
    },
    "teacher": {
        "d_model": ("int", 64),
        "n_layers": ("int", 4),
        "n_heads": ("int", 4),
        "d_ff": ("int", 128),
        "max_seq_len": ("int", 32),
        "n_experts": ("int", 8),
        "top_k": ("int", 2),
        "moe_layers": ("int_list", (1, 3)),
    },
    "student": {
        "d_model": ("int", 64),
        "n_layers": ("int", 4),
        "n_heads": ("int", 4),
        "d_ff": ("int", 128),
        "max_seq_len": ("int", 32),
    },
    "data": {
        "source": ("str", "synthetic"),      # synthetic | jsonl
        "tasks": ("str_list", ("copy", "reverse")),
        "n_pairs": ("int", 3000),
        "min_len": ("int", 3),
        "max_len": ("int", 6),
        "jsonl_path": ("opt_str", None),
    },
    "pretrain": {
        "epochs": ("int", 3),
        "batch_size": ("int", 16),
        "lr": ("float", 1e-3),
        "weight_decay": ("float", 0.01),
        "aux_coeff": ("float", 0.01),
        "noisy": ("bool", True),
    },
    "distill": {
        "method": ("str", "kd"),
        "lam": ("float", 0.05),
        "m_inner": ("int", 2),
        "beta": ("float", 0.01),
        "sar_kl_direction": ("str", "forward"),
        "lr_student": ("float", 1e-4),
        "lr_router": ("float", 1e-3),
        "weight_decay": ("float", 0.01),
        "epochs": ("int", 2),
        "batch_size": ("int", 16),
        "ka_expert_count": ("opt_int", None),
        "teacher_k": ("opt_int", None),
        "temperature": ("float", 1.0),
        "top_k": ("int", 0),
        "top_p": ("float", 1.0),
        "max_new": ("opt_int", 16),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    # typed views ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run"]["out"])

    @property
    def teacher_ckpt(self) -> Path:
        explicit = self.values["run"]["teacher_ckpt"]
        return Path(explicit) if explicit else self.out_dir / "teacher.ckpt"

    def teacher_model_config(self) -> ModelConfig:
        t = self.values["teacher"]
        moe = None
        if t["n_experts"] > 0:
            moe = MoESpec(n_experts=t["n_experts"], top_k=t["top_k"],
                          layer_indices=tuple(t["moe_layers"]))
        return ModelConfig(d_model=t["d_model"], n_layers=t["n_layers"],
                           n_heads=t["n_heads"], d_ff=t["d_ff"],
                           max_seq_len=t["max_seq_len"], moe=moe)

    def student_model_config(self) -> ModelConfig:
        s = self.values["student"]
        return ModelConfig(d_model=s["d_model"], n_layers=s["n_layers"],
                           n_heads=s["n_heads"], d_ff=s["d_ff"],
                           max_seq_len=s["max_seq_len"])

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.values["pretrain"])

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**self.values["distill"])

    # provenance -----------------------------------------------------------

    # Filesystem locations stay out of the hash: where artifacts live does
    # not change what gets computed, and reruns into different directories
    # must compare byte-identical.
    _UNHASHED = frozenset({("run", "out"), ("run", "teacher_ckpt"),
                           ("data", "jsonl_path")})

    def canonical_lines(self) -> list[str]:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                if (section, key) in self._UNHASHED:
                    continue
                lines.append(f"{section}.{key}={_render(self.values[section][key])}")
        return lines

    def config_hash(self) -> str:
        return hashlib.sha256("\n".join(self.canonical_lines()).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        out = []
        for section in _SCHEMA:
            out.append(f"[{section}]")
            for key in _SCHEMA[section]:
                out.append(f"{key} = {_render(self.values[section][key])}")
            out.append("")
        return "\n".join(out)


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(section: str, key: str, raw: str):
    kind, _default = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "opt_str":
            return raw or None
        if kind == "opt_int":
            return int(raw) if raw else None
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "str_list":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}")
    raise ConfigError(f"unhandled schema kind {kind}")  # pragma: no cover


def default_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()}
                      for s, keys in _SCHEMA.items()})


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults, overlaid with the file when one is given."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            cfg.values[section][key] = _parse_value(section, key, raw)
    _validate(cfg)
    return cfg


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags override file values (flags win)."""
    if getattr(args, "seed", None) is not None:
        cfg.values["run"]["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg.values["run"]["out"] = args.out
    if getattr(args, "teacher", None) is not None:
        cfg.values["run"]["teacher_ckpt"] = args.teacher
    if getattr(args, "method", None) is not None:
        cfg.values["distill"]["method"] = args.method
    if getattr(args, "lam", None) is not None:
        cfg.values["distill"]["lam"] = args.lam
    if getattr(args, "m_inner", None) is not None:
        cfg.values["distill"]["m_inner"] = args.m_inner
    if getattr(args, "beta", None) is not None:
        cfg.values["distill"]["beta"] = args.beta
    if getattr(args, "k", None) is not None:
        cfg.values["distill"]["teacher_k"] = args.k
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["distill"]["method"] not in METHODS:
        raise ConfigError(f"unknown method {v['distill']['method']!r}; "
                          f"choose from {METHODS}")
    if v["data"]["source"] not in ("synthetic", "jsonl"):
        raise ConfigError("data.source must be 'synthetic' or 'jsonl'")
    if v["data"]["source"] == "jsonl" and not v["data"]["jsonl_path"]:
        raise ConfigError("data.source=jsonl needs data.jsonl_path")
    for task in v["data"]["tasks"]:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    if v["data"]["n_pairs"] < 3:
        raise ConfigError("data.n_pairs must be >= 3 to split")
    # reuse the dataclass invariants, surfacing violations as config errors
    try:
        cfg.teacher_model_config()
        cfg.student_model_config()
        cfg.pretrain_config()
        cfg.distill_config()
    except ContractError as e:
        raise ConfigError(str(e)) from e
