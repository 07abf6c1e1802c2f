"""Artifact serialization helpers: deterministic JSON/JSONL files, content
hashes, and provenance manifests.

Every artifact produced by the pipeline is either a single JSON document or a
JSONL file whose first line is a header record carrying ``kind`` and
``version``. Serialization is deterministic: fixed key order, compact
separators, no timestamps, floats via Python repr (exact round-trip).
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Iterable
from typing import Any

import numpy as np

from .errors import ArtifactError

from . import __version__

_SEPARATORS = (",", ":")


def jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays to plain Python for JSON encoding."""
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def dumps(record: Any) -> str:
    """Encode one record deterministically. Rejects NaN/inf: missing values
    must be encoded as null explicitly, never smuggled in as NaN."""
    return json.dumps(jsonable(record), separators=_SEPARATORS, allow_nan=False)


def prepare_output(path: str, force: bool) -> None:
    """Refuse to overwrite an existing artifact unless forced."""
    if os.path.exists(path) and not force:
        raise ArtifactError(
            f"output already exists: {path} (pass --force to overwrite)"
        )
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_json(path: str, record: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps(record))
        fh.write("\n")
    os.replace(tmp, path)


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps(record))
            fh.write("\n")
    os.replace(tmp, path)


def read_json(path: str, expected_kind: str | None = None) -> dict:
    if not os.path.exists(path):
        raise ArtifactError(f"artifact not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"corrupt JSON artifact {path}: {exc}") from exc
    if expected_kind is not None:
        _check_header(record, expected_kind, path)
    return record


def read_jsonl(path: str, expected_kind: str | None = None) -> list[dict]:
    """Read a JSONL artifact. The first record is the header; kind/version
    are validated when ``expected_kind`` is given."""
    if not os.path.exists(path):
        raise ArtifactError(f"artifact not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ArtifactError(
                    f"corrupt JSONL artifact {path} at line {lineno}: {exc}"
                ) from exc
    if not records:
        raise ArtifactError(f"empty artifact: {path}")
    if expected_kind is not None:
        _check_header(records[0], expected_kind, path)
    return records


def _check_header(header: dict, expected_kind: str, path: str) -> None:
    kind = header.get("kind")
    if kind != expected_kind:
        raise ArtifactError(
            f"artifact {path} has kind {kind!r}, expected {expected_kind!r}"
        )
    if "version" not in header:
        raise ArtifactError(f"artifact {path} header lacks a version field")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def manifest_path(artifact: str) -> str:
    return artifact + ".manifest.json"


def write_manifest(
    artifact: str,
    command: str,
    config: dict,
    inputs: dict[str, str] | None = None,
    extra_outputs: list[str] | None = None,
) -> str:
    """Write the provenance manifest next to a finished artifact.

    ``inputs`` maps input artifact paths to their content hashes. No
    timestamps: a re-run with identical inputs yields identical bytes.
    """
    record = {
        "kind": "manifest",
        "version": 1,
        "tool_version": __version__,
        "command": command,
        "artifact": os.path.basename(artifact),
        "sha256": sha256_file(artifact),
        "config": jsonable(config),
        "inputs": {os.path.basename(k): v for k, v in (inputs or {}).items()},
        "extra_outputs": sorted(extra_outputs or []),
    }
    path = manifest_path(artifact)
    write_json(path, record)
    return path
