"""Session-log ingestion.

The log format is line-delimited JSON, one session per line, UTF-8, with
fields ``query`` / ``initial_response`` / ``trajectory`` (a list of
``{user_input, model_response}``).  A ``json`` format variant accepts a
single top-level array of the same records.

Malformed records never vanish silently: each becomes a reject entry
naming its line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

from .serde import file_digest
from .types import IngestReject, Session, Turn

FORMATS = ("jsonl", "json")


class IngestError(Exception):
    """The log file itself is unreadable or structurally invalid."""


@dataclass(frozen=True)
class IngestResult:
    sessions: Tuple[Session, ...]
    rejects: Tuple[IngestReject, ...]
    source_digest: str


def _parse_record(record: object, line_no: int, fallback_id: str) -> Session:
    if not isinstance(record, dict):
        raise ValueError("record is not an object")
    query = record.get("query")
    if not isinstance(query, str) or not query:
        raise ValueError("missing or empty 'query' field")
    initial = record.get("initial_response")
    if not isinstance(initial, str):
        raise ValueError("missing 'initial_response' field")
    raw_turns = record.get("trajectory")
    if not isinstance(raw_turns, list):
        raise ValueError("missing 'trajectory' field")
    turns = []
    for k, t in enumerate(raw_turns):
        if not isinstance(t, dict) or not isinstance(t.get("user_input"), str) or not t["user_input"]:
            raise ValueError(f"trajectory[{k}] lacks a non-empty 'user_input'")
        turns.append(Turn(user_input=t["user_input"], model_response=str(t.get("model_response", ""))))
    session_id = record.get("id") or fallback_id
    language = record.get("language_tag")
    return Session(
        id=str(session_id),
        query=query,
        initial_response=initial,
        trajectory=tuple(turns),
        language_tag=language if isinstance(language, str) else None,
    )


def ingest_sessions(path: Path | str, format: str = "jsonl") -> IngestResult:
    """Parse a session log; order-preserving and idempotent.

    Sessions missing an ``id`` get one derived from the file digest and
    their line index, so re-ingestion of the same file yields equal
    corpora.
    """
    path = Path(path)
    if format not in FORMATS:
        raise IngestError(f"unknown log format {format!r}; expected one of {FORMATS}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read session log {path}: {exc}")
    digest = file_digest(path)
    prefix = digest[:8]

    records: list[tuple[int, object, str]] = []
    rejects: list[IngestReject] = []
    if format == "jsonl":
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append((line_no, json.loads(line), ""))
            except json.JSONDecodeError as exc:
                rejects.append(IngestReject(line=line_no, reason=f"invalid JSON: {exc.msg}"))
    else:
        try:
            top = json.loads(text)
        except json.JSONDecodeError as exc:
            raise IngestError(f"session log {path} is not valid JSON: {exc.msg}")
        if not isinstance(top, list):
            raise IngestError(f"session log {path} must be a JSON array in 'json' format")
        records = [(i + 1, rec, "") for i, rec in enumerate(top)]

    sessions: list[Session] = []
    seen_ids: set[str] = set()
    for line_no, record, _ in records:
        try:
            session = _parse_record(record, line_no, fallback_id=f"{prefix}-{line_no:06d}")
        except ValueError as exc:
            rejects.append(IngestReject(line=line_no, reason=str(exc)))
            continue
        if session.id in seen_ids:
            rejects.append(IngestReject(line=line_no, reason=f"duplicate session id {session.id!r}"))
            continue
        seen_ids.add(session.id)
        sessions.append(session)
    return IngestResult(sessions=tuple(sessions), rejects=tuple(rejects), source_digest=digest)
