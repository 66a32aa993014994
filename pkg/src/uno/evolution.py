"""Online evolution: fold newly collected logs into an existing store.

Everything is re-clustered over old plus new pairs.  A changed cluster
count adopts the new clustering wholesale (fresh assessment and builds);
an unchanged count keeps the original centroids and gates module updates:
experts continue training on incremental data and are kept only when the
win rate beats the pre-evolution level by the configured delta (otherwise
they retrain on the full data), while critics retrain on the full data
and replace the old adapter only when the best validation loss drops by
more than the configured delta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import build_features, ward_cluster
from .config import RunConfig
from .distillation import distill_corpus, emitted_pairs
from .experience import TrainerFailure, build_primary, build_reflective, optimize_cluster
from .ingest import ingest_sessions
from .pipeline import BackendBundle, Pipeline, assign_splits, critic_records, split_pairs
from .store import ArtifactStore
from .types import ClusterRecord, ClusterStatus, GapClass, PreferencePair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterAction:
    cluster_id: int
    action: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id, "action": self.action, "detail": self.detail}


@dataclass(frozen=True)
class EvolveReport:
    clusters_before: int
    clusters_after: int
    new_pairs: int
    adopted_new_clustering: bool
    actions: tuple[ClusterAction, ...]

    def to_dict(self) -> dict:
        return {
            "clusters_before": self.clusters_before,
            "clusters_after": self.clusters_after,
            "new_pairs": self.new_pairs,
            "adopted_new_clustering": self.adopted_new_clustering,
            "actions": [a.to_dict() for a in self.actions],
        }


def _assign_to_centroids(
    pairs: Sequence[PreferencePair],
    clusters: Sequence[ClusterRecord],
    backends: BackendBundle,
) -> dict[int, list[PreferencePair]]:
    """Nearest original full-feature centroid for each new pair."""
    assigned: dict[int, list[PreferencePair]] = {c.cluster_id: [] for c in clusters}
    if not pairs:
        return assigned
    features = build_features(pairs, backends.embed)
    centroid_matrix = np.stack([np.asarray(c.centroid_full, dtype=float) for c in clusters])
    ids = [c.cluster_id for c in clusters]
    for pair, feat in zip(pairs, features):
        dists = np.linalg.norm(centroid_matrix - feat.full, axis=1)
        assigned[ids[int(np.argmin(dists))]].append(pair)
    return assigned


def _rebuild_from_scratch(pipeline: Pipeline, all_pairs: list[PreferencePair]) -> list[ClusterAction]:
    pipeline.store.save_pairs(all_pairs)
    pipeline.stage_cluster()
    pipeline.stage_assess()
    pipeline.stage_build()
    final = pipeline.store.load_final_clusters()
    return [
        ClusterAction(cluster_id=c.cluster_id, action="rebuilt", detail=c.status.value) for c in final
    ]


def evolve(
    store: ArtifactStore,
    new_log_path: Path | str,
    config: RunConfig,
    backends: BackendBundle,
) -> EvolveReport:
    engine = config.engine
    previous = store.load_final_clusters()
    old_pairs = list(store.load_pairs())
    old_profiles = {p.cluster_id: p for p in store.load_profiles()}
    old_by_sid = {p.session_id for p in old_pairs}

    ingest = ingest_sessions(new_log_path)
    old_sessions, old_rejects = store.load_sessions()
    new_outcomes = distill_corpus(ingest.sessions, backends.chat, engine)
    new_pairs = [p for p in emitted_pairs(new_outcomes) if p.session_id not in old_by_sid]
    all_pairs = old_pairs + new_pairs
    store.save_sessions(tuple(old_sessions) + ingest.sessions, tuple(old_rejects) + ingest.rejects)

    pipeline = Pipeline(config=config, store=store, backends=backends)

    # Re-cluster everything; the cluster count decides the path.
    features = build_features(all_pairs, backends.embed) if all_pairs else []
    k_new = 0
    if all_pairs:
        k_new = len(ward_cluster(features, engine.epsilon_var).partition)
    k_old = len(previous)

    if k_new != k_old:
        logger.info("cluster count changed %d -> %d; adopting new clustering", k_old, k_new)
        actions = _rebuild_from_scratch(pipeline, all_pairs)
        final = store.load_final_clusters()
        report = EvolveReport(
            clusters_before=k_old,
            clusters_after=len(final),
            new_pairs=len(new_pairs),
            adopted_new_clustering=True,
            actions=tuple(actions),
        )
        store.write_json("reports/evolution.json", report.to_dict())
        return report

    logger.info("cluster count unchanged at %d; keeping original centroids", k_old)
    assigned = _assign_to_centroids(new_pairs, previous, backends)
    pairs_by_sid = {p.session_id: p for p in all_pairs}
    actions: list[ClusterAction] = []
    final_records: list[ClusterRecord] = []

    for record in previous:
        incremental = assigned.get(record.cluster_id, [])
        combined_ids = sorted(set(record.member_session_ids) | {p.session_id for p in incremental})
        combined_pairs = [pairs_by_sid[sid] for sid in combined_ids]
        label = "|".join(combined_ids)
        splits = assign_splits(combined_ids, engine.train_split_fraction, engine.seed, label=label)
        train, val = split_pairs(combined_pairs, splits)
        updated = record
        if record.status is ClusterStatus.PRIMARY:
            updated, action = _evolve_primary(
                record, incremental, train, val, engine, backends, pairs_by_sid
            )
        elif record.status is ClusterStatus.REFLECTIVE:
            updated, action = _evolve_reflective(record, train, val, engine, backends)
        else:
            profile = old_profiles.get(record.cluster_id)
            classification = profile.classification if profile else GapClass.HIGH
            result = optimize_cluster(
                cluster_id=record.cluster_id,
                classification=classification,
                train_pairs=train,
                validation_pairs=val,
                critic_train=critic_records(train),
                critic_validation=critic_records(val),
                member_count=len(combined_pairs),
                trainer=backends.trainer,
                chat=backends.chat,
                config=engine,
            )
            updated = record.evolved(status=result.status, adapter=result.adapter)
            action = ClusterAction(
                cluster_id=record.cluster_id, action="reattempted", detail=result.status.value
            )
        updated = ClusterRecord(
            cluster_id=updated.cluster_id,
            member_session_ids=tuple(combined_ids),
            centroid_full=updated.centroid_full,
            centroid_query=updated.centroid_query,
            gap_mean=updated.gap_mean,
            status=updated.status,
            adapter=updated.adapter,
        )
        final_records.append(updated)
        actions.append(action)

    store.save_pairs(all_pairs)
    store.save_final_clusters(final_records)
    report = EvolveReport(
        clusters_before=k_old,
        clusters_after=len(final_records),
        new_pairs=len(new_pairs),
        adopted_new_clustering=False,
        actions=tuple(actions),
    )
    store.write_json("reports/evolution.json", report.to_dict())
    return report


def _evolve_primary(
    record: ClusterRecord,
    incremental: Sequence[PreferencePair],
    full_train: Sequence[PreferencePair],
    full_val: Sequence[PreferencePair],
    engine,
    backends: BackendBundle,
    pairs_by_sid: dict,
) -> tuple[ClusterRecord, ClusterAction]:
    previous_rate = float(record.adapter.metrics["win_rate"])
    if incremental:
        outcome = build_primary(
            record.cluster_id,
            train=list(incremental),
            validation=list(full_val),
            trainer=backends.trainer,
            chat=backends.chat,
            config=engine,
            init_from=record.adapter.backend_ref,
        )
        if (
            outcome.report is not None
            and outcome.report.win_rate_best > previous_rate + engine.online_winrate_delta
            and outcome.adapter is not None
        ):
            return (
                record.evolved(adapter=outcome.adapter),
                ClusterAction(
                    cluster_id=record.cluster_id,
                    action="continued",
                    detail=f"win rate {previous_rate:.3f} -> {outcome.report.win_rate_best:.3f}",
                ),
            )
    # Not enough improvement (or nothing new): retrain on the full data.
    outcome = build_primary(
        record.cluster_id,
        train=list(full_train),
        validation=list(full_val),
        trainer=backends.trainer,
        chat=backends.chat,
        config=engine,
    )
    if outcome.accepted and outcome.adapter is not None:
        return (
            record.evolved(adapter=outcome.adapter),
            ClusterAction(
                cluster_id=record.cluster_id,
                action="retrained_full",
                detail=f"win rate {outcome.report.win_rate_best:.3f}",
            ),
        )
    return (
        record,
        ClusterAction(
            cluster_id=record.cluster_id,
            action="kept_old_expert",
            detail=outcome.reason,
        ),
    )


def _evolve_reflective(
    record: ClusterRecord,
    full_train: Sequence[PreferencePair],
    full_val: Sequence[PreferencePair],
    engine,
    backends: BackendBundle,
) -> tuple[ClusterRecord, ClusterAction]:
    previous_loss = float(record.adapter.metrics["validation_loss"])
    try:
        adapter = build_reflective(
            record.cluster_id,
            critic_records(full_train),
            critic_records(full_val),
            backends.trainer,
            engine,
        )
    except TrainerFailure as exc:
        return record, ClusterAction(
            cluster_id=record.cluster_id, action="kept_old_critic", detail=f"retrain failed: {exc}"
        )
    new_loss = float(adapter.metrics["validation_loss"])
    if previous_loss - new_loss > engine.online_valloss_delta:
        return (
            record.evolved(adapter=adapter),
            ClusterAction(
                cluster_id=record.cluster_id,
                action="replaced_critic",
                detail=f"val loss {previous_loss:.3f} -> {new_loss:.3f}",
            ),
        )
    return record, ClusterAction(
        cluster_id=record.cluster_id,
        action="kept_old_critic",
        detail=f"val loss {previous_loss:.3f} -> {new_loss:.3f} (drop <= {engine.online_valloss_delta})",
    )
