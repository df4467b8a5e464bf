"""Run-directory artifact files.

Every artifact is JSON with a schema-version header carrying the config
hash and seed, so a run can be audited and reproduced. Sidecars are JSONL
(header line, then one record per line); reports are single JSON documents.
All writers are deterministic: sorted keys, no timestamps.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

SCHEMA_VERSION = 1

SENSITIVITY_FILE = "sensitivity.jsonl"
PREDICTOR_FILE = "predictor.npz"
REFINED_FILE = "refined.jsonl"
TRIGGER_FILE = "triggers.jsonl"
POISONED_FILE = "poisoned.jsonl"
INJECTION_FILE = "injection.json"
MODEL_FILE = "model.npz"
EVAL_FILE = "eval.json"
DEFENSE_FILE = "defense.json"
REPORT_FILE = "report.json"
TOKENIZER_FILE = "tokenizer.json"
CONFIG_FILE = "config.txt"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _header(kind: str, config_hash: str, seed: int, extra: dict | None = None) -> dict:
    head = {"schema_version": SCHEMA_VERSION, "kind": kind, "config_hash": config_hash, "seed": seed}
    if extra:
        head.update(extra)
    return head


def write_jsonl(
    path: str | Path,
    kind: str,
    config_hash: str,
    seed: int,
    records: Iterable[dict],
    extra: dict | None = None,
):
    lines = [canonical_json(_header(kind, config_hash, seed, extra))]
    lines.extend(canonical_json(r) for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"artifact {path} is empty")
    header = json.loads(lines[0])
    if "schema_version" not in header:
        raise DataError(f"artifact {path} lacks a schema header")
    return header, [json.loads(line) for line in lines[1:] if line.strip()]


def write_report(
    path: str | Path, kind: str, config_hash: str, seed: int, payload: dict
):
    doc = _header(kind, config_hash, seed)
    doc.update(payload)
    Path(path).write_text(canonical_json(doc) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "schema_version" not in doc:
        raise DataError(f"artifact {path} lacks a schema header")
    return doc


def require_artifacts(run_dir: str | Path, names: Sequence[str]) -> list[Path]:
    run_dir = Path(run_dir)
    missing = [name for name in names if not (run_dir / name).exists()]
    if missing:
        raise DataError(f"missing artifacts in {run_dir}: {', '.join(missing)}")
    return [run_dir / name for name in names]
