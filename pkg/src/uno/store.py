"""On-disk artifact store.

One subdirectory per pipeline stage, each with a manifest carrying the
config hash and seed that produced it.  All files are human-readable
line-delimited JSON written through the canonical serializer, so identical
runs produce byte-identical stores.  Wall-clock times live only in
``timestamps.json``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

from .serde import canonical_pretty, dump_jsonl, load_jsonl
from .types import (
    AdapterHandle,
    ClusterRecord,
    DistillationOutcome,
    GapProfile,
    IngestReject,
    PreferencePair,
    Session,
    VerifierReport,
)

LAYOUT_VERSION = 1

STAGE_DIRS = {
    "ingest": "sessions",
    "distill": "pairs",
    "cluster": "clusters",
    "assess": "assessment",
    "build": "adapters",
}


class StoreError(Exception):
    """Missing or unreadable artifact state."""


class StoreVersionError(StoreError):
    """The on-disk layout was written by an incompatible engine."""


class ArtifactStore:
    def __init__(self, root: Path | str):
        self.root = Path(root)

    # -- plumbing

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _write_text(self, rel: str, text: str) -> None:
        path = self.path(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")

    def write_json(self, rel: str, obj: object) -> None:
        self._write_text(rel, canonical_pretty(obj) + "\n")

    def read_json(self, rel: str) -> object:
        path = self.path(rel)
        if not path.exists():
            raise StoreError(f"no artifact at {path}")
        import json

        return json.loads(path.read_text(encoding="utf-8"))

    def write_jsonl(self, rel: str, rows: Sequence[object]) -> None:
        path = self.path(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        dump_jsonl(rows, path)

    def read_jsonl(self, rel: str) -> list:
        path = self.path(rel)
        if not path.exists():
            raise StoreError(f"no artifact at {path}")
        return load_jsonl(path)

    def has(self, rel: str) -> bool:
        return self.path(rel).exists()

    # -- layout versioning

    def write_meta(self, meta: dict) -> None:
        payload = dict(meta)
        payload["layout_version"] = LAYOUT_VERSION
        self.write_json("pipeline.json", payload)

    def read_meta(self) -> dict:
        if not self.path("pipeline.json").exists():
            raise StoreError(f"no artifact state under {self.root} (pipeline.json missing)")
        meta = self.read_json("pipeline.json")
        version = meta.get("layout_version")
        if version != LAYOUT_VERSION:
            raise StoreVersionError(
                f"store layout version {version} does not match engine layout version {LAYOUT_VERSION}"
            )
        return meta

    def write_stage_manifest(self, stage: str, manifest: dict) -> None:
        self.write_json(f"{STAGE_DIRS.get(stage, stage)}/manifest.json", manifest)

    def read_stage_manifest(self, stage: str) -> Optional[dict]:
        rel = f"{STAGE_DIRS.get(stage, stage)}/manifest.json"
        if not self.has(rel):
            return None
        return self.read_json(rel)

    # -- sessions

    def save_sessions(self, sessions: Sequence[Session], rejects: Sequence[IngestReject]) -> None:
        self.write_jsonl("sessions/sessions.jsonl", [s.to_dict() for s in sessions])
        self.write_jsonl("sessions/rejects.jsonl", [r.to_dict() for r in rejects])

    def load_sessions(self) -> Tuple[Tuple[Session, ...], Tuple[IngestReject, ...]]:
        sessions = tuple(Session.from_dict(d) for d in self.read_jsonl("sessions/sessions.jsonl"))
        rejects = tuple(IngestReject.from_dict(d) for d in self.read_jsonl("sessions/rejects.jsonl"))
        return sessions, rejects

    # -- distillation

    def save_outcomes(self, outcomes: Sequence[DistillationOutcome]) -> None:
        self.write_jsonl("reports/distillation.jsonl", [o.to_dict() for o in outcomes])

    def load_outcomes(self) -> Tuple[DistillationOutcome, ...]:
        return tuple(DistillationOutcome.from_dict(d) for d in self.read_jsonl("reports/distillation.jsonl"))

    def save_pairs(self, pairs: Sequence[PreferencePair]) -> None:
        self.write_jsonl("pairs/pairs.jsonl", [p.to_dict() for p in pairs])

    def load_pairs(self) -> Tuple[PreferencePair, ...]:
        return tuple(PreferencePair.from_dict(d) for d in self.read_jsonl("pairs/pairs.jsonl"))

    # -- clustering

    def save_clusters(
        self,
        records: Sequence[ClusterRecord],
        merge_trace: Sequence[dict],
        splits: Mapping[int, Mapping[str, Sequence[str]]],
    ) -> None:
        self.write_jsonl("clusters/clusters.jsonl", [c.to_dict() for c in records])
        self.write_jsonl("clusters/merge_trace.jsonl", list(merge_trace))
        self.write_json(
            "clusters/partition.json",
            {str(c.cluster_id): list(c.member_session_ids) for c in records},
        )
        self.write_json("clusters/splits.json", {str(k): dict(v) for k, v in splits.items()})

    def load_clusters(self) -> Tuple[ClusterRecord, ...]:
        return tuple(ClusterRecord.from_dict(d) for d in self.read_jsonl("clusters/clusters.jsonl"))

    def load_merge_trace(self) -> list:
        return self.read_jsonl("clusters/merge_trace.jsonl")

    def load_splits(self) -> dict[int, dict[str, list[str]]]:
        raw = self.read_json("clusters/splits.json")
        return {int(k): {sk: list(sv) for sk, sv in v.items()} for k, v in raw.items()}

    # -- gap assessment

    def save_profiles(self, profiles: Sequence[GapProfile]) -> None:
        self.write_jsonl("reports/gap_profiles.jsonl", [p.to_dict() for p in profiles])

    def load_profiles(self) -> Tuple[GapProfile, ...]:
        return tuple(GapProfile.from_dict(d) for d in self.read_jsonl("reports/gap_profiles.jsonl"))

    # -- build

    def save_final_clusters(self, records: Sequence[ClusterRecord]) -> None:
        self.write_jsonl("adapters/clusters_final.jsonl", [c.to_dict() for c in records])
        registry = {
            str(c.cluster_id): c.adapter.to_dict() for c in records if c.adapter is not None
        }
        self.write_json("adapters/registry.json", registry)

    def load_final_clusters(self) -> Tuple[ClusterRecord, ...]:
        return tuple(ClusterRecord.from_dict(d) for d in self.read_jsonl("adapters/clusters_final.jsonl"))

    def load_registry(self) -> dict[int, AdapterHandle]:
        raw = self.read_json("adapters/registry.json")
        return {int(k): AdapterHandle.from_dict(v) for k, v in raw.items()}

    def save_verifier_report(self, report: VerifierReport, verdicts: Sequence[dict]) -> None:
        self.write_json(
            f"reports/verifier/cluster_{report.cluster_id:04d}.json",
            {"report": report.to_dict(), "verdicts": list(verdicts)},
        )

    def load_verifier_reports(self) -> list[dict]:
        directory = self.path("reports/verifier")
        if not directory.exists():
            return []
        out = []
        for path in sorted(directory.glob("cluster_*.json")):
            import json

            out.append(json.loads(path.read_text(encoding="utf-8")))
        return out
