import json
from types import SimpleNamespace

import pytest

from moelab.cli import main
from moelab.metrics import read_metrics

CONFIG = """\
[run]
seed = 3

[teacher]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32
max_seq_len = 24
n_experts = 4
top_k = 2
moe_layers = 1

[student]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32
max_seq_len = 24

[data]
tasks = copy
n_pairs = 60
min_len = 1
max_len = 4

[pretrain]
epochs = 1
batch_size = 16
lr = 1e-3

[distill]
method = kd
epochs = 1
batch_size = 16
lr_student = 1e-4
lr_router = 1e-3
max_new = 8
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One pretrained teacher plus kd and sar students, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "run.ini"
    ini.write_text(CONFIG)
    out = root / "run"
    base = ["--config", str(ini), "--out", str(out)]
    assert main(["pretrain", *base]) == 0
    assert main(["distill", *base]) == 0
    assert main(["distill", *base, "--method", "sar"]) == 0
    return SimpleNamespace(root=root, ini=ini, out=out,
                           base=["--config", str(ini)])


def csv_rows(path) -> list[dict]:
    import csv
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    return list(csv.DictReader(lines[1:]))


# artifacts -----------------------------------------------------------------


def test_pretrain_artifacts(ws):
    for name in ("teacher.ckpt", "metrics_pretrain.jsonl", "timings.jsonl",
                 "pretrain_loss.png", "config.ini"):
        assert (ws.out / name).exists(), name
    assert not (ws.out / ".moelab.lock").exists()


def test_pretrain_metrics_record_optimizer(ws):
    meta, rows = read_metrics(ws.out / "metrics_pretrain.jsonl")
    assert meta["optimizer"]["name"] == "adamw"
    assert meta["optimizer"]["betas"] == [0.9, 0.999]
    assert meta["optimizer"]["lr"] == 1e-3
    assert meta["phase"] == "pretrain"
    assert len(rows) == 4  # 56 train pairs / 16 per batch, 1 epoch
    assert all("wall_ms" not in r for r in rows)


def test_distill_artifacts(ws):
    assert (ws.out / "student_kd.ckpt").exists()
    assert (ws.out / "distill_kd_loss.png").exists()
    meta, rows = read_metrics(ws.out / "metrics_kd.jsonl")
    assert meta["method"] == "kd"
    assert meta["optimizer"]["lr_student"] == 1e-4
    assert "lr_router" not in meta["optimizer"]
    assert len(rows) == 4


def test_sar_adapted_teacher_and_router_signal(ws):
    assert (ws.out / "teacher_sar.ckpt").exists()
    meta, rows = read_metrics(ws.out / "metrics_sar.jsonl")
    assert meta["optimizer"]["lr_router"] == 1e-3
    assert any(r["router_grad_norm"] > 0 for r in rows[:10])
    assert all(r["kl"] is not None and r["lb_loss"] is not None for r in rows)


# analyze -------------------------------------------------------------------


def test_gate_mass_full_k_is_one(ws):
    out = ws.root / "analysis_gm"
    rc = main(["analyze", "gate-mass", *ws.base, "--out", str(out),
               "--teacher", str(ws.out / "teacher.ckpt"), "--k", "4"])
    assert rc == 0
    rows = csv_rows(out / "gate_mass.csv")
    assert rows and all(float(r["activated_mass"]) == 1.0 for r in rows)
    doc = json.loads((out / "gate_mass.json").read_text())
    assert doc["provenance"]["averaged_over"] == "response_tokens"
    assert (out / "gate_mass.png").exists()


def test_gate_mass_default_k_is_partial(ws):
    out = ws.root / "analysis_gm2"
    rc = main(["analyze", "gate-mass", *ws.base, "--out", str(out),
               "--teacher", str(ws.out / "teacher.ckpt")])
    assert rc == 0
    rows = csv_rows(out / "gate_mass.csv")
    assert all(0.0 < float(r["activated_mass"]) < 1.0 for r in rows)


def test_router_shift_report(ws):
    out = ws.root / "analysis_rs"
    rc = main(["analyze", "router-shift", *ws.base, "--out", str(out),
               "--teacher", str(ws.out / "teacher.ckpt"),
               "--after", str(ws.out / "teacher_sar.ckpt")])
    assert rc == 0
    rows = csv_rows(out / "router_shift.csv")
    assert [r["layer"] for r in rows] == ["1"]
    assert float(rows[0]["mean_kl"]) > 0.0
    assert float(rows[0]["max_kl"]) >= float(rows[0]["mean_kl"])


def test_router_shift_self_is_zero(ws):
    out = ws.root / "analysis_rs0"
    rc = main(["analyze", "router-shift", *ws.base, "--out", str(out),
               "--teacher", str(ws.out / "teacher.ckpt"),
               "--after", str(ws.out / "teacher.ckpt")])
    assert rc == 0
    rows = csv_rows(out / "router_shift.csv")
    assert float(rows[0]["mean_kl"]) == 0.0


def test_k_sweep_row_per_k(ws):
    out = ws.root / "analysis_ks"
    rc = main(["analyze", "k-sweep", *ws.base, "--out", str(out),
               "--teacher", str(ws.out / "teacher.ckpt"), "--ks", "1,4"])
    assert rc == 0
    rows = csv_rows(out / "k_sweep.csv")
    assert [r["k"] for r in rows] == ["1", "4"]
    assert all(0.0 <= float(r["teacher_rouge_l"]) <= 1.0 for r in rows)


# eval ------------------------------------------------------------------------


def test_eval_multiple_checkpoints(ws, capsys):
    out = ws.root / "evaluation"
    rc = main(["eval", str(ws.out / "teacher.ckpt"), str(ws.out / "student_kd.ckpt"),
               *ws.base, "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "eval.json").read_text())
    top = doc["rows"][0]
    assert len(top["checkpoints"]) == 2
    means = [c["mean_f"] for c in top["checkpoints"]]
    assert top["aggregate_mean_f"] == pytest.approx(sum(means) / 2)
    assert len(csv_rows(out / "eval.csv")) == 2 * 2  # 2 ckpts x 2 test pairs
    assert "aggregate over 2 checkpoint(s)" in capsys.readouterr().out


def test_eval_empty_test_set_is_explicit(ws, capsys, monkeypatch):
    import moelab.cli as cli_mod
    monkeypatch.setattr(cli_mod, "_dataset", lambda cfg: ([], [], []))
    rc = main(["eval", str(ws.out / "teacher.ckpt"), *ws.base,
               "--out", str(ws.root / "ev_empty")])
    assert rc == 4
    assert "empty test set" in capsys.readouterr().err


# sweep ------------------------------------------------------------------------


def test_sweep_over_seeds(ws):
    out = ws.root / "sweep_seed"
    rc = main(["sweep", *ws.base, "--out", str(out), "--method", "sft",
               "--param", "seed", "--values", "0,1"])
    assert rc == 0
    rows = csv_rows(out / "sweep.csv")
    assert [r["seed"] for r in rows] == ["0", "1"]
    assert (out / "sweep.png").exists()


# exit codes --------------------------------------------------------------------


def test_missing_teacher_checkpoint_is_io_error(ws, capsys):
    rc = main(["distill", *ws.base, "--out", str(ws.root / "no_teacher"),
               "--teacher", str(ws.root / "ghost.ckpt")])
    assert rc == 3
    assert "ghost.ckpt" in capsys.readouterr().err


def test_unknown_method_is_config_error(ws, capsys):
    rc = main(["distill", *ws.base, "--out", str(ws.root / "bad_method"),
               "--method", "osmosis"])
    assert rc == 2
    assert "osmosis" in capsys.readouterr().err


def test_missing_config_file_is_config_error(ws):
    rc = main(["pretrain", "--config", str(ws.root / "ghost.ini"),
               "--out", str(ws.root / "no_config")])
    assert rc == 2


def test_lock_conflict_is_io_error(ws, capsys):
    out = ws.root / "locked"
    out.mkdir()
    (out / ".moelab.lock").write_text("12345")
    rc = main(["pretrain", *ws.base, "--out", str(out)])
    assert rc == 3
    assert "locked" in capsys.readouterr().err


def test_empty_sweep_values_is_contract_error(ws, capsys):
    rc = main(["sweep", *ws.base, "--out", str(ws.root / "empty_sweep"),
               "--method", "sft", "--param", "seed", "--values", ","])
    assert rc == 4


# determinism -------------------------------------------------------------------


def test_reruns_are_byte_identical_across_directories(ws):
    a, b = ws.root / "det_a", ws.root / "det_b"
    assert main(["pretrain", *ws.base, "--out", str(a)]) == 0
    assert main(["pretrain", *ws.base, "--out", str(b)]) == 0
    for name in ("teacher.ckpt", "metrics_pretrain.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
