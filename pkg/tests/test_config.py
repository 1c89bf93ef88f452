import argparse

import pytest

from moelab.config import apply_flags, default_config, load_config
from moelab.errors import ConfigError


def flags(**kw) -> argparse.Namespace:
    base = dict(seed=None, out=None, teacher=None, method=None, lam=None,
                m_inner=None, beta=None, k=None)
    base.update(kw)
    return argparse.Namespace(**base)


def test_defaults_are_self_consistent():
    cfg = load_config(None)
    assert cfg.seed == 0
    assert cfg.out_dir.name == "default"
    assert cfg.teacher_model_config().moe.n_experts == 8
    assert cfg.student_model_config().moe is None
    assert cfg.distill_config().method == "kd"
    assert cfg.pretrain_config().noisy is True


def test_teacher_ckpt_defaults_into_out_dir():
    cfg = default_config()
    assert cfg.teacher_ckpt == cfg.out_dir / "teacher.ckpt"
    cfg.values["run"]["teacher_ckpt"] = "elsewhere/t.ckpt"
    assert str(cfg.teacher_ckpt) == "elsewhere/t.ckpt"


def test_ini_round_trip(tmp_path):
    cfg = default_config()
    cfg.values["run"]["seed"] = 17
    cfg.values["distill"]["method"] = "gkd"
    cfg.values["teacher"]["moe_layers"] = (0, 2)
    path = tmp_path / "run.ini"
    path.write_text(cfg.to_ini())
    loaded = load_config(path)
    assert loaded.values == cfg.values
    assert loaded.config_hash() == cfg.config_hash()


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nseed = 5\n")
    cfg = load_config(path)
    assert cfg.seed == 5
    assert cfg.values["teacher"]["d_model"] == 64


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[experiments]\nname = x\n")
    with pytest.raises(ConfigError, match="experiments"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nseeed = 5\n")
    with pytest.raises(ConfigError, match="seeed"):
        load_config(path)


def test_bad_value_names_section_and_key(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[pretrain]\nlr = fast\n")
    with pytest.raises(ConfigError, match=r"\[pretrain\] lr"):
        load_config(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")


def test_invalid_method_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[distill]\nmethod = osmosis\n")
    with pytest.raises(ConfigError, match="osmosis"):
        load_config(path)


def test_jsonl_source_needs_path(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[data]\nsource = jsonl\n")
    with pytest.raises(ConfigError, match="jsonl_path"):
        load_config(path)


def test_model_invariants_surface_as_config_errors(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[teacher]\nd_model = 65\n")  # not divisible by heads
    with pytest.raises(ConfigError):
        load_config(path)


def test_flags_override_file_values():
    cfg = apply_flags(default_config(), flags(seed=99, method="sar", lam=0.2))
    assert cfg.seed == 99
    assert cfg.values["distill"]["method"] == "sar"
    assert cfg.values["distill"]["lam"] == 0.2


def test_flag_validation_applies():
    with pytest.raises(ConfigError):
        apply_flags(default_config(), flags(method="osmosis"))


def test_hash_is_stable_and_sensitive():
    a, b = default_config(), default_config()
    assert a.config_hash() == b.config_hash()
    b.values["run"]["seed"] = 1
    assert a.config_hash() != b.config_hash()
    assert len(a.config_hash()) == 16


def test_hash_ignores_artifact_locations():
    # reruns into different directories must compare identical
    a, b = default_config(), default_config()
    b.values["run"]["out"] = "runs/elsewhere"
    b.values["run"]["teacher_ckpt"] = "other/teacher.ckpt"
    b.values["data"]["jsonl_path"] = "other/data.jsonl"
    assert a.config_hash() == b.config_hash()


def test_canonical_lines_sorted():
    lines = default_config().canonical_lines()
    assert lines == sorted(lines)
    assert all("=" in line for line in lines)
    assert not any(line.startswith("run.out") for line in lines)


def test_dense_teacher_via_zero_experts(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[teacher]\nn_experts = 0\n")
    assert load_config(path).teacher_model_config().moe is None
