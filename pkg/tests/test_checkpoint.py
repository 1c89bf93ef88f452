import numpy as np
import pytest

from moelab.checkpoint import (
    MAGIC,
    VERSION,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from moelab.errors import CheckpointError
from moelab.model import LanguageModel

from conftest import TINY_MOE, model_checksums


def test_round_trip_is_bit_exact(moe_teacher, tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, moe_teacher, meta={"seed": 7, "config_hash": "ff"})
    model, meta = load_checkpoint(path)
    assert meta == {"seed": 7, "config_hash": "ff"}
    assert model.config == moe_teacher.config
    assert model_checksums(model) == model_checksums(moe_teacher)


def test_save_load_save_is_byte_identical(moe_teacher, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, moe_teacher, meta={"seed": 1})
    model, meta = load_checkpoint(a)
    save_checkpoint(b, model, meta=meta)
    assert a.read_bytes() == b.read_bytes()


def test_read_checkpoint_raw_view(dense_student, tmp_path):
    path = tmp_path / "d.ckpt"
    save_checkpoint(path, dense_student)
    header, arrays = read_checkpoint(path)
    assert header["meta"] == {}
    assert set(arrays) == {n for n, _ in dense_student.parameters()}
    for name, p in dense_student.parameters():
        assert np.array_equal(arrays[name], p.data)


def test_loaded_arrays_are_writable(moe_teacher, tmp_path):
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, moe_teacher)
    model, _ = load_checkpoint(path)
    for _, p in model.parameters():
        p.data += 1.0  # must not blow up on a frombuffer view


def test_corrupt_payload_detected(moe_teacher, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, moe_teacher)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="corrupt"):
        read_checkpoint(path)


def test_truncated_file_detected(moe_teacher, tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, moe_teacher)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 3])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_bad_magic_detected(tmp_path):
    import hashlib
    body = b"NOPE" + bytes(100)
    path = tmp_path / "m.ckpt"
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_unsupported_version_detected(moe_teacher, tmp_path):
    import hashlib
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, moe_teacher)
    raw = bytearray(path.read_bytes()[:-32])
    raw[4:8] = (VERSION + 9).to_bytes(4, "little")
    raw = bytes(raw)
    path.write_bytes(raw + hashlib.sha256(raw).digest())
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(CheckpointError, match="gone.ckpt"):
        read_checkpoint(tmp_path / "gone.ckpt")


def test_no_tmp_file_left_behind(moe_teacher, tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", moe_teacher)
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


def test_magic_constant():
    assert MAGIC == b"MOEL" and VERSION == 1


def test_header_mismatch_with_config(moe_teacher, tmp_path):
    # swap the stored config for a wider model; arrays no longer fit
    import hashlib
    import json
    import struct
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, moe_teacher)
    raw = path.read_bytes()[:-32]
    header_len = struct.unpack_from("<Q", raw, 8)[0]
    header = json.loads(raw[16 : 16 + header_len])
    header["model"]["d_model"] *= 2
    new_header = json.dumps(header, sort_keys=True).encode()
    body = raw[:8] + struct.pack("<Q", len(new_header)) + new_header + raw[16 + header_len :]
    (tmp_path / "s.ckpt").write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
