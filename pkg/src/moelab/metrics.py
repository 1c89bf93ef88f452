"""Run artifacts: metrics streams, report files, and the output lock.

Metrics are JSON-lines, append-only, with a metadata object as the
first line. Wall-clock times are split into a `timings.jsonl` sidecar
so the main metrics file is byte-identical across reruns of the same
(config, seed) — timing is the one field that can never be.

Reports (CSV/JSON) are written atomically via a temp file + rename and
carry provenance (config hash, seed, artifact version) in a comment
line / top-level object.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

from . import __version__
from .errors import ContractError, LockError

TIMING_FIELDS = ("wall_ms",)


def provenance(config_hash: str, seed: int) -> dict:
    return {"config_hash": config_hash, "seed": seed, "version": __version__}


def _atomic_write(path: Path, payload: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_metrics(out_dir: str | Path, rows: list[dict], meta: dict,
                  name: str = "metrics") -> Path:
    """metrics.jsonl (meta first, deterministic fields only) plus a
    timings.jsonl sidecar holding the wall-clock columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    main = io.StringIO()
    side = io.StringIO()
    main.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
    for row in rows:
        kept = {k: v for k, v in row.items() if k not in TIMING_FIELDS}
        timing = {k: row[k] for k in TIMING_FIELDS if k in row}
        main.write(json.dumps(kept, sort_keys=True) + "\n")
        if timing:
            timing["step"] = row.get("step")
            side.write(json.dumps(timing, sort_keys=True) + "\n")
    path = out_dir / f"{name}.jsonl"
    _atomic_write(path, main.getvalue())
    if side.tell():
        _atomic_write(out_dir / "timings.jsonl", side.getvalue())
    return path


def read_metrics(path: str | Path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(ln) for ln in fh if ln.strip()]
    if not lines or "meta" not in lines[0]:
        raise ContractError(f"{path}: missing metadata line")
    return lines[0]["meta"], lines[1:]


def write_report_json(path: str | Path, rows: list[dict], prov: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps({"provenance": prov, "rows": rows},
                                   sort_keys=True, indent=2) + "\n")


def write_report_csv(path: str | Path, rows: list[dict], prov: dict) -> None:
    """Plot-ready CSV; provenance rides in a single leading comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(prov.items())) + "\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _atomic_write(path, buf.getvalue())


class OutputLock:
    """One run per output directory, enforced by an O_EXCL lock file."""

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / ".moelab.lock"
        self._fd: int | None = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"{self.path.parent} is locked by another run "
                f"(remove {self.path.name} if that run is dead)")
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self.path.unlink(missing_ok=True)
        return False
