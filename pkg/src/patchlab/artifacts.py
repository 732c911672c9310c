"""Run-directory bookkeeping: deterministic writers and a digest manifest."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path


def sha256_path(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class RunManifest:
    """Per-run registry of every emitted file and its content digest."""

    def __init__(self, run_dir: Path, meta: dict | None = None):
        self.run_dir = Path(run_dir)
        self.meta = meta or {}
        self.files: dict[str, str] = {}

    def add(self, path: Path) -> Path:
        path = Path(path)
        rel = str(path.relative_to(self.run_dir))
        self.files[rel] = sha256_path(path)
        return path

    def add_tree(self, root: Path) -> None:
        for p in sorted(Path(root).rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                self.add(p)

    def write(self) -> Path:
        payload = {"meta": self.meta, "files": dict(sorted(self.files.items()))}
        return write_json(self.run_dir / "manifest.json", payload)
