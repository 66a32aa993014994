"""Canonical serialization and hashing helpers.

Every byte the pipeline writes goes through these functions so that two
runs with the same seed produce byte-identical stores.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable


def canonical_dumps(obj: Any) -> str:
    """JSON with sorted keys and stable separators."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def canonical_pretty(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2)


def dump_jsonl(rows: Iterable[Any], path: Path) -> int:
    """Write one canonical JSON object per line; returns row count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(canonical_dumps(row))
            fh.write("\n")
            count += 1
    return count


def load_jsonl(path: Path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def text_digest(text: str) -> str:
    return sha256_hex(text.encode("utf-8"))


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def obj_digest(obj: Any) -> str:
    return text_digest(canonical_dumps(obj))


def derive_seed(root_seed: int, *labels: str) -> int:
    """Stable per-stage sub-seed from the single run seed."""
    tag = f"{root_seed}:" + ":".join(labels)
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "big")
