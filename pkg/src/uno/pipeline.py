"""Resumable stage orchestration: ingest -> distill -> cluster -> assess
-> build, with routing and evolution layered on top.

Every stage writes its own store subdirectory plus a manifest recording
the config hash and its input fingerprints; re-running a completed stage
with unchanged inputs is a no-op, so a crashed run resumes by re-invoking
``run all``.  One lock file per store serializes writers.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .backends.base import ChatBackend, EmbeddingBackend, RerankBackend, SeqRecord, TrainerBackend
from .backends.http import (
    CompositeChatBackend,
    HttpChatBackend,
    HttpEmbeddingBackend,
    HttpRerankBackend,
    HttpTrainerBackend,
)
from .backends.mocks import build_mock_backends
from .clustering import build_features, compute_centroids, ward_cluster
from .config import RunConfig
from .distillation import distill_corpus, emitted_pairs
from .experience import optimize_cluster, rules_as_target
from .gap import assess_cluster
from .ingest import ingest_sessions
from .prompts import prompt_hashes
from .serde import derive_seed, obj_digest, text_digest
from .simulator import load_world
from .store import ArtifactStore
from .types import ClusterRecord, ClusterStatus, PreferencePair, Split

logger = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "distill", "cluster", "assess", "build")


class PipelineError(Exception):
    pass


class StoreLockedError(PipelineError):
    pass


@dataclass
class BackendBundle:
    chat: ChatBackend
    embed: EmbeddingBackend
    rerank: RerankBackend
    trainer: TrainerBackend


def make_backends(config: RunConfig) -> BackendBundle:
    b = config.backends
    if b.mode == "mock":
        world = load_world(b.mock_world) if b.mock_world else None
        hub_path = f"{b.mock_world}.hub.json" if b.mock_world else None
        mocks = build_mock_backends(
            seed=config.engine.seed,
            embed_dim=b.embed_dim,
            world=world,
            judge_mode=b.judge_mode,
            hub_path=hub_path,
        )
        return BackendBundle(chat=mocks.chat, embed=mocks.embed, rerank=mocks.rerank, trainer=mocks.trainer)
    api_key = os.environ.get("UNO_API_KEY")
    common = dict(retries=b.retries, max_in_flight=b.max_in_flight, api_key=api_key)
    chat = HttpChatBackend(b.resolved_url("chat"), model=b.chat_model, **common)
    trainer = HttpTrainerBackend(b.resolved_url("trainer"), **common)
    return BackendBundle(
        chat=CompositeChatBackend(base=chat, trainer=trainer),
        embed=HttpEmbeddingBackend(b.resolved_url("embed"), model=b.embed_model, **common),
        rerank=HttpRerankBackend(b.resolved_url("rerank"), **common),
        trainer=trainer,
    )


# ---------------------------------------------------------------------------
# Locking


class StoreLock:
    def __init__(self, root: Path):
        self.path = root / ".lock"

    def __enter__(self) -> "StoreLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid_text = self.path.read_text().strip() or "0"
            try:
                os.kill(int(pid_text), 0)
            except (OSError, ValueError):
                logger.warning("removing stale lock left by pid %s", pid_text)
                self.path.unlink()
                return self.__enter__()
            raise StoreLockedError(f"store is locked by running pid {pid_text}")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc) -> None:
        if self.path.exists():
            self.path.unlink()


# ---------------------------------------------------------------------------
# Split assignment


def assign_splits(
    member_ids: Sequence[str], fraction: float, seed: int, label: str
) -> dict[str, list[str]]:
    """Deterministic per-cluster train/validation split, independent of
    input order."""
    ordered = sorted(member_ids)
    rng = np.random.default_rng(derive_seed(seed, "split", label))
    rng.shuffle(ordered)
    n_train = max(1, math.floor(fraction * len(ordered))) if ordered else 0
    return {"train": sorted(ordered[:n_train]), "validation": sorted(ordered[n_train:])}


def split_pairs(
    pairs: Sequence[PreferencePair], splits: dict[str, list[str]]
) -> tuple[list[PreferencePair], list[PreferencePair]]:
    train_ids = set(splits["train"])
    val_ids = set(splits["validation"])
    train = [p.with_split(Split.TRAIN) for p in pairs if p.session_id in train_ids]
    val = [p.with_split(Split.VALIDATION) for p in pairs if p.session_id in val_ids]
    return train, val


def critic_records(pairs: Sequence[PreferencePair]) -> list[SeqRecord]:
    return [
        SeqRecord(
            session_id=p.session_id,
            input_query=p.query,
            input_response=p.rejected,
            target=rules_as_target(p.rules.rules),
        )
        for p in pairs
    ]


# ---------------------------------------------------------------------------
# Stages


@dataclass
class Pipeline:
    config: RunConfig
    store: ArtifactStore
    backends: BackendBundle
    log_path: Optional[Path] = None

    def _engine(self):
        return self.config.engine

    def _manifest(self, stage: str, inputs: dict, counts: dict) -> dict:
        return {
            "stage": stage,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "seed": self._engine().seed,
            "inputs": inputs,
            "counts": counts,
        }

    def _stage_inputs(self, stage: str) -> dict:
        idx = STAGE_ORDER.index(stage)
        if idx == 0:
            if self.log_path is None:
                raise PipelineError("ingest requires --logs pointing at a session log")
            return {"log": text_digest(Path(self.log_path).read_text(encoding="utf-8"))}
        prev = STAGE_ORDER[idx - 1]
        prev_manifest = self.store.read_stage_manifest(prev)
        if prev_manifest is None:
            raise PipelineError(f"stage {stage!r} requires completed stage {prev!r}")
        return {prev: obj_digest(prev_manifest)}

    def _is_complete(self, stage: str, inputs: dict) -> bool:
        manifest = self.store.read_stage_manifest(stage)
        return (
            manifest is not None
            and manifest.get("config_hash") == self.config.config_hash()
            and manifest.get("inputs") == inputs
        )

    def _record_completion(self, stage: str) -> None:
        meta = {
            "engine_version": __version__,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "seed": self._engine().seed,
            "prompt_hashes": prompt_hashes(),
            "completed_stages": self._completed() + [stage],
        }
        self.store.write_meta(meta)
        self._touch_timestamp(stage)

    def _completed(self) -> list[str]:
        try:
            return [s for s in self.store.read_meta().get("completed_stages", [])]
        except Exception:
            return []

    def _touch_timestamp(self, stage: str) -> None:
        import datetime
        import json

        path = self.store.path("timestamps.json")
        stamps = {}
        if path.exists():
            stamps = json.loads(path.read_text(encoding="utf-8"))
        stamps[stage] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(stamps, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    # -- individual stages

    def stage_ingest(self) -> None:
        result = ingest_sessions(self.log_path)
        self.store.save_sessions(result.sessions, result.rejects)
        self.store.write_stage_manifest(
            "ingest",
            self._manifest(
                "ingest",
                {"log": text_digest(Path(self.log_path).read_text(encoding="utf-8"))},
                {"sessions": len(result.sessions), "rejects": len(result.rejects)},
            ),
        )

    def stage_distill(self) -> None:
        sessions, _ = self.store.load_sessions()
        outcomes = distill_corpus(sessions, self.backends.chat, self._engine())
        if len(outcomes) != len(sessions):
            raise PipelineError(
                f"distillation lost sessions: {len(outcomes)} outcomes for {len(sessions)} inputs"
            )
        pairs = emitted_pairs(outcomes)
        self.store.save_outcomes(outcomes)
        self.store.save_pairs(pairs)
        self.store.write_stage_manifest(
            "distill",
            self._manifest(
                "distill",
                self._stage_inputs("distill"),
                {"outcomes": len(outcomes), "pairs": len(pairs)},
            ),
        )

    def stage_cluster(self) -> None:
        pairs = self.store.load_pairs()
        records: list[ClusterRecord] = []
        trace_rows: list[dict] = []
        splits: dict[int, dict[str, list[str]]] = {}
        if pairs:
            features = build_features(pairs, self.backends.embed)
            result = ward_cluster(features, self._engine().epsilon_var)
            centroids = compute_centroids(result.partition, features)
            trace_rows = [m.to_dict() for m in result.merges]
            if result.rejected_cost is not None:
                trace_rows.append({"rejected_cost": result.rejected_cost})
            for cid, (members, (centroid_full, centroid_query)) in enumerate(
                zip(result.partition, centroids)
            ):
                member_ids = tuple(sorted(pairs[i].session_id for i in members))
                records.append(
                    ClusterRecord(
                        cluster_id=cid,
                        member_session_ids=member_ids,
                        centroid_full=tuple(float(x) for x in centroid_full),
                        centroid_query=tuple(float(x) for x in centroid_query),
                        status=ClusterStatus.UNASSESSED,
                    )
                )
                splits[cid] = assign_splits(
                    member_ids,
                    self._engine().train_split_fraction,
                    self._engine().seed,
                    label="|".join(member_ids),
                )
        self.store.save_clusters(records, trace_rows, splits)
        self.store.write_stage_manifest(
            "cluster",
            self._manifest(
                "cluster", self._stage_inputs("cluster"), {"clusters": len(records)}
            ),
        )

    def stage_assess(self) -> None:
        clusters = self.store.load_clusters()
        pairs = {p.session_id: p for p in self.store.load_pairs()}
        profiles = []
        for record in clusters:
            member_rules = {sid: pairs[sid].rules for sid in record.member_session_ids}
            member_queries = {sid: pairs[sid].query for sid in record.member_session_ids}
            profiles.append(
                assess_cluster(
                    record.cluster_id,
                    member_rules,
                    member_queries,
                    self.backends.chat,
                    self.backends.rerank,
                    self._engine(),
                )
            )
        self.store.save_profiles(profiles)
        self.store.write_stage_manifest(
            "assess",
            self._manifest("assess", self._stage_inputs("assess"), {"profiles": len(profiles)}),
        )

    def stage_build(self) -> None:
        clusters = self.store.load_clusters()
        profiles = {p.cluster_id: p for p in self.store.load_profiles()}
        pairs_by_sid = {p.session_id: p for p in self.store.load_pairs()}
        splits = self.store.load_splits()
        final_records = []
        status_counts = {s.value: 0 for s in ClusterStatus}
        for record in clusters:
            profile = profiles[record.cluster_id]
            member_pairs = [pairs_by_sid[sid] for sid in record.member_session_ids]
            train, val = split_pairs(member_pairs, splits[record.cluster_id])
            result = optimize_cluster(
                cluster_id=record.cluster_id,
                classification=profile.classification,
                train_pairs=train,
                validation_pairs=val,
                critic_train=critic_records(train),
                critic_validation=critic_records(val),
                member_count=len(member_pairs),
                trainer=self.backends.trainer,
                chat=self.backends.chat,
                config=self._engine(),
            )
            if result.verifier is not None:
                self.store.save_verifier_report(
                    result.verifier,
                    [
                        {"epoch": e + 1, "verdicts": [v.to_dict() for v in epoch_verdicts]}
                        for e, epoch_verdicts in enumerate(result.verdicts)
                    ],
                )
            final_records.append(
                record.evolved(gap_mean=profile.mean, status=result.status, adapter=result.adapter)
            )
            status_counts[result.status.value] += 1
        self.store.save_final_clusters(final_records)
        self.store.write_stage_manifest(
            "build",
            self._manifest("build", self._stage_inputs("build"), status_counts),
        )

    # -- orchestration

    def run(self, stage: str = "all") -> list[str]:
        """Run one stage or everything, skipping stages whose manifests
        already match the current config and inputs.  Returns the list of
        stages actually executed."""
        if stage != "all" and stage not in STAGE_ORDER:
            raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGE_ORDER} or 'all'")
        wanted = STAGE_ORDER if stage == "all" else STAGE_ORDER[: STAGE_ORDER.index(stage) + 1]
        executed = []
        with StoreLock(self.store.root):
            for name in wanted:
                inputs = self._stage_inputs(name)
                if self._is_complete(name, inputs):
                    logger.info("stage %s already complete; skipping", name)
                    continue
                logger.info("running stage %s", name)
                getattr(self, f"stage_{name}")()
                executed.append(name)
                self._record_completion(name)
        return executed


# ---------------------------------------------------------------------------
# Reporting


def report(store: ArtifactStore) -> tuple[str, dict]:
    """Human-readable per-cluster summary plus its machine-readable twin."""
    try:
        meta = store.read_meta()
    except Exception:
        return "store is empty: no completed stages", {"clusters": [], "completed_stages": []}
    completed = meta.get("completed_stages", [])
    if not completed:
        return "store is empty: no completed stages", {"clusters": [], "completed_stages": []}

    rows = []
    if store.has("adapters/clusters_final.jsonl"):
        records = store.load_final_clusters()
    elif store.has("clusters/clusters.jsonl"):
        records = store.load_clusters()
    else:
        records = ()
    profiles = {}
    if store.has("reports/gap_profiles.jsonl"):
        profiles = {p.cluster_id: p for p in store.load_profiles()}
    for record in records:
        profile = profiles.get(record.cluster_id)
        gap = record.gap_mean if record.gap_mean is not None else (profile.mean if profile else None)
        win = record.adapter.metrics.get("win_rate") if record.adapter else None
        rows.append(
            {
                "cluster_id": record.cluster_id,
                "size": len(record.member_session_ids),
                "gap_mean": gap,
                "status": record.status.value,
                "win_rate": win,
                "adapter_ref": record.adapter.backend_ref if record.adapter else None,
            }
        )

    n_reflective = sum(1 for r in rows if r["status"] == "reflective")
    lines = [
        f"{'cluster':>7}  {'size':>5}  {'gap':>6}  {'status':<11} {'win_rate':>8}  adapter",
        "-" * 72,
    ]
    for r in rows:
        gap = f"{r['gap_mean']:.3f}" if r["gap_mean"] is not None else "-"
        win = f"{r['win_rate']:.3f}" if r["win_rate"] is not None else "-"
        lines.append(
            f"{r['cluster_id']:>7}  {r['size']:>5}  {gap:>6}  {r['status']:<11} {win:>8}  {r['adapter_ref'] or '-'}"
        )
    lines.append("-" * 72)
    lines.append(f"reflective clusters: {n_reflective} / {len(rows)}")
    lines.append(f"completed stages: {', '.join(completed)}")
    summary = {
        "clusters": rows,
        "reflective_clusters": n_reflective,
        "total_clusters": len(rows),
        "completed_stages": completed,
    }
    return "\n".join(lines), summary
