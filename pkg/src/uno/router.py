"""Inference workflow: nearest-centroid routing, then the primary,
reflective, or fallback generation path.

Routing is a pure function of (query embedding, centroid table, outlier
threshold): the query embedding is unit-normalized, compared to every
cluster's query centroid by Euclidean distance, and the closest cluster
wins unless that distance exceeds the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .backends.base import ChatBackend, ChatRequest, EmbeddingBackend
from .clustering import normalize
from .config import EngineConfig
from .prompts import render
from .types import ClusterRecord, ClusterStatus, RouteDecision, RoutePath

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TraceEntry:
    purpose: str  # base | expert | critic
    adapter: Optional[str]
    response: str

    def to_dict(self) -> dict:
        return {"purpose": self.purpose, "adapter": self.adapter, "response": self.response}


@dataclass(frozen=True)
class RespondResult:
    decision: RouteDecision
    response: str
    trace: Tuple[TraceEntry, ...]

    def to_dict(self) -> dict:
        return {
            "decision": self.decision.to_dict(),
            "response": self.response,
            "trace": [t.to_dict() for t in self.trace],
        }


def route(
    query_id: str,
    query: str,
    embed_backend: EmbeddingBackend,
    clusters: Sequence[ClusterRecord],
    outlier_distance: float,
) -> RouteDecision:
    """Pick the cluster with the nearest query centroid; ties go to the
    lowest cluster id; beyond the outlier threshold the query falls back
    to the base policy."""
    if not query:
        raise ValueError("cannot route an empty query")
    if not clusters:
        return RouteDecision(
            query_id=query_id, chosen_cluster=None, distance=float("inf"), path=RoutePath.FALLBACK
        )
    vec = normalize(embed_backend.embed([query])[0])
    best_id: Optional[int] = None
    best_dist = float("inf")
    for record in sorted(clusters, key=lambda c: c.cluster_id):
        centroid = np.asarray(record.centroid_query, dtype=float)
        dist = float(np.linalg.norm(vec - centroid))
        if dist < best_dist:
            best_dist = dist
            best_id = record.cluster_id
    if best_dist > outlier_distance:
        return RouteDecision(
            query_id=query_id, chosen_cluster=None, distance=best_dist, path=RoutePath.FALLBACK
        )
    by_id = {c.cluster_id: c for c in clusters}
    status = by_id[best_id].status
    if status is ClusterStatus.PRIMARY:
        path = RoutePath.PRIMARY
    elif status is ClusterStatus.REFLECTIVE:
        path = RoutePath.REFLECTIVE
    else:
        # unassessed or fallback clusters answer with the base policy
        path = RoutePath.FALLBACK
    return RouteDecision(query_id=query_id, chosen_cluster=best_id, distance=best_dist, path=path)


def respond(
    query: str,
    decision: RouteDecision,
    clusters: Sequence[ClusterRecord],
    chat: ChatBackend,
    config: EngineConfig,
) -> RespondResult:
    """Generate the final response for a routed query.

    primary    -> one call through the cluster's expert adapter
    reflective -> base draft, critic critique, base revision (3 calls)
    fallback   -> one base-policy call
    A routed cluster whose adapter has gone missing degrades to fallback
    with a warning rather than failing the query.
    """
    by_id = {c.cluster_id: c for c in clusters}
    path = decision.path
    adapter = None
    if path is not RoutePath.FALLBACK:
        record = by_id.get(decision.chosen_cluster)
        adapter = record.adapter if record else None
        if adapter is None:
            logger.warning(
                "cluster %s routed %s but has no adapter; degrading to fallback",
                decision.chosen_cluster,
                path.value,
            )
            path = RoutePath.FALLBACK

    temperature = config.temperature
    if path is RoutePath.PRIMARY:
        response = chat.chat(ChatRequest.user(query, temperature=temperature), adapter=adapter.backend_ref)
        trace = (TraceEntry(purpose="expert", adapter=adapter.backend_ref, response=response),)
        return RespondResult(decision=decision, response=response, trace=trace)

    if path is RoutePath.REFLECTIVE:
        draft = chat.chat(ChatRequest.user(query, temperature=temperature))
        critique_prompt = render("critic_input", query=query, draft=draft)
        critique = chat.chat(
            ChatRequest.user(critique_prompt, temperature=temperature), adapter=adapter.backend_ref
        )
        revise_prompt = render("critique_revise", query=query, draft=draft, critique=critique)
        final = chat.chat(ChatRequest.user(revise_prompt, temperature=temperature))
        trace = (
            TraceEntry(purpose="base", adapter=None, response=draft),
            TraceEntry(purpose="critic", adapter=adapter.backend_ref, response=critique),
            TraceEntry(purpose="base", adapter=None, response=final),
        )
        return RespondResult(decision=decision, response=final, trace=trace)

    response = chat.chat(ChatRequest.user(query, temperature=temperature))
    return RespondResult(
        decision=decision,
        response=response,
        trace=(TraceEntry(purpose="base", adapter=None, response=response),),
    )


def route_and_respond(
    query_id: str,
    query: str,
    embed_backend: EmbeddingBackend,
    clusters: Sequence[ClusterRecord],
    chat: ChatBackend,
    config: EngineConfig,
) -> RespondResult:
    decision = route(query_id, query, embed_backend, clusters, config.outlier_distance)
    return respond(query, decision, clusters, chat, config)
