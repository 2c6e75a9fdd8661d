"""On-disk run directories.

Layout::

    <out>/<run_id>/
        manifest.json     written before the first agent call, frozen once finished
        transcripts/      raw agent interactions (JSON / JSONL)
        checkpoints/      resume state
        metrics/          derived per-item tables
        exports/          figure-shaped tidy CSVs
        cache/            embedding vectors

The run id is a content hash of the manifest without its timestamps, so a
second live run of the same configuration lands in the same directory and
is refused unless resuming.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from filelock import FileLock, Timeout

from . import __version__

LAYOUT = ("transcripts", "checkpoints", "metrics", "exports", "cache")
_VOLATILE = ("run_id", "status", "started", "finished")


class RunError(Exception):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def run_id_for(manifest: dict[str, Any]) -> str:
    stable = {k: v for k, v in manifest.items() if k not in _VOLATILE}
    return hashlib.sha256(canonical_json(stable).encode("utf-8")).hexdigest()[:12]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write(path: Path, data: str | bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        w.writerow([format_cell(c) for c in row])
    return buf.getvalue()


class RunStore:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock: FileLock | None = None

    # lifecycle

    @classmethod
    def create(cls, out_dir: str | os.PathLike, manifest: dict[str, Any], resume: bool = False) -> "RunStore":
        run_id = run_id_for(manifest)
        store = cls(Path(out_dir) / run_id)
        if store.manifest_path.exists():
            existing = store.manifest
            if existing.get("status") == "finished":
                raise RunError(f"run {run_id} is already finished; use `export` to re-derive its outputs")
            if not resume:
                raise RunError(f"run {run_id} already exists at {store.path}; pass --resume to continue it")
            store.acquire()
            return store
        if resume:
            raise RunError(f"nothing to resume: no run {run_id} under {out_dir}")
        for sub in LAYOUT:
            (store.path / sub).mkdir(parents=True, exist_ok=True)
        store.acquire()
        full = dict(manifest, run_id=run_id, status="running", started=_now(), finished=None)
        store.write_json("manifest.json", full)
        return store

    @classmethod
    def open(cls, ref: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> "RunStore":
        """Open by path or by run id under ``out_dir``."""
        candidates = [Path(ref)]
        if out_dir is not None:
            candidates.append(Path(out_dir) / str(ref))
        for c in candidates:
            if (c / "manifest.json").is_file():
                return cls(c)
        raise RunError(f"unknown run {ref!s}")

    def acquire(self):
        self._lock = FileLock(str(self.path / ".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            self._lock = None
            raise RunError(f"another process is writing to {self.path}") from None

    def release(self):
        if self._lock is not None:
            self._lock.release()
            self._lock = None

    def __enter__(self) -> "RunStore":
        return self

    def __exit__(self, *exc):
        self.release()

    # manifest

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    @property
    def manifest(self) -> dict[str, Any]:
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    @property
    def run_id(self) -> str:
        return self.manifest["run_id"]

    @property
    def finished(self) -> bool:
        return self.manifest.get("status") == "finished"

    def finish(self):
        m = self.manifest
        if m.get("status") == "finished":
            raise RunError("run is already finished")
        m.update(status="finished", finished=_now())
        self.write_json("manifest.json", m)

    # files

    def file(self, rel: str) -> Path:
        return self.path / rel

    def exists(self, rel: str) -> bool:
        return self.file(rel).exists()

    def write_text(self, rel: str, text: str):
        if rel != "manifest.json" and self.manifest_path.exists() and self.finished and not rel.startswith(("exports/", "metrics/")):
            raise RunError(f"run is finished; refusing to modify {rel}")
        atomic_write(self.file(rel), text)

    def read_text(self, rel: str) -> str:
        return self.file(rel).read_text(encoding="utf-8")

    def write_json(self, rel: str, obj: Any):
        self.write_text(rel, json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True) + "\n")

    def read_json(self, rel: str) -> Any:
        return json.loads(self.read_text(rel))

    def write_jsonl(self, rel: str, rows: Iterable[Any]):
        self.write_text(rel, "".join(canonical_json(r) + "\n" for r in rows))

    def read_jsonl(self, rel: str) -> list[Any]:
        return [json.loads(line) for line in self.read_text(rel).splitlines() if line.strip()]

    def write_table(self, rel: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
        self.write_text(rel, csv_text(header, rows))

    def list(self, subdir: str, pattern: str = "*") -> list[str]:
        base = self.file(subdir)
        return sorted(str(p.relative_to(self.path)) for p in base.glob(pattern)) if base.is_dir() else []


def base_manifest(kind: str, config_dict: dict[str, Any], **extra: Any) -> dict[str, Any]:
    from .prompts import template_hashes

    m = {
        "kind": kind,
        "config": config_dict,
        "seed": config_dict.get("seed"),
        "templates": template_hashes(),
        "package_version": __version__,
    }
    m.update(extra)
    return m
