"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic `MOEL` | u32 version | u64 header length | header JSON (UTF-8)
    u64 n_params | per param: u16 name len | name | u8 ndim | u64*ndim
    extents | raw float64 row-major data | sha256 of everything above

The header JSON carries the model config plus caller metadata
(seed, config hash), so a checkpoint is self-describing. Writes go
through a temp file and an atomic rename; save -> load -> save is
byte-identical because parameter order and JSON key order are fixed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LanguageModel, ModelConfig

MAGIC = b"MOEL"
VERSION = 1


def save_checkpoint(path: str | Path, model: LanguageModel,
                    meta: dict | None = None) -> None:
    header = {"model": model.config.to_dict(), "meta": dict(meta or {})}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.parameters()

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    blob += struct.pack("<Q", len(params))
    for name, p in params:
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}Q", *p.data.shape)
        blob += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw view: (header dict, name -> float64 array)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from e
    if len(raw) < len(MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch — file is corrupt")

    r = _Reader(body, str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e

    (n_params,) = r.unpack("<Q")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape)
        arrays[name] = data.astype(np.float64)  # own, writable copy
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[LanguageModel, dict]:
    """Rebuild the model: every parameter restored bit-exactly."""
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model"])
    model = LanguageModel(config, np.random.default_rng(0))  # values overwritten below
    names = [n for n, _ in model.parameters()]
    if set(names) != set(arrays):
        missing = set(names) - set(arrays)
        extra = set(arrays) - set(names)
        raise CheckpointError(
            f"{path}: parameter names do not match the config "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, p in model.parameters():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, config wants {p.data.shape}")
        p.data = arr
    return model, header.get("meta", {})
