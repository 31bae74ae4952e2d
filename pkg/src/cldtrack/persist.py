"""Versioned, checksummed JSON containers written atomically."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from .errors import ChecksumError, VersionError

FORMAT_VERSION = 1


def _canonical(doc: dict) -> bytes:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checksum(doc: dict) -> str:
    return hashlib.sha256(_canonical(doc)).hexdigest()


def write_atomic(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_container(path: str | Path, doc: dict) -> None:
    """Stamp ``doc`` with version and checksum, then write it atomically."""
    doc = {"version": FORMAT_VERSION, **{k: v for k, v in doc.items() if k != "checksum"}}
    doc["checksum"] = checksum(doc)
    write_atomic(path, json.dumps(doc, indent=1, allow_nan=False) + "\n")


def load_container(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: file is truncated or corrupt ({exc})") from exc
    if not isinstance(doc, dict) or "checksum" not in doc:
        raise ChecksumError(f"{path}: missing checksum")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {doc.get('version')!r}")
    try:
        expected = checksum(doc)
    except (TypeError, ValueError) as exc:
        raise ChecksumError(f"{path}: unserializable content") from exc
    if doc["checksum"] != expected:
        raise ChecksumError(f"{path}: checksum mismatch")
    return doc
