"""Nearest-centroid routing and the three generation paths."""

from __future__ import annotations

import math

import numpy as np
import pytest

from uno.backends import ChatRequest, TableEmbedder
from uno.config import EngineConfig
from uno.router import respond, route, route_and_respond
from uno.types import (
    AdapterHandle,
    AdapterKind,
    ClusterRecord,
    ClusterStatus,
    RouteDecision,
    RoutePath,
)

CFG = EngineConfig()


def _unit_at_distance(d: float, dim: int = 4) -> list[float]:
    """Unit vector at Euclidean distance d from e1 (both unit norm)."""
    cos = 1 - d * d / 2.0
    sin = math.sqrt(max(0.0, 1 - cos * cos))
    vec = [0.0] * dim
    vec[0], vec[1] = cos, sin
    return vec


def _cluster(cid, centroid, status=ClusterStatus.FALLBACK, adapter=None, dim=4):
    full = list(centroid) + [0.0] * dim
    return ClusterRecord(
        cluster_id=cid,
        member_session_ids=(f"s{cid}",),
        centroid_full=tuple(full),
        centroid_query=tuple(centroid),
        status=status,
        adapter=adapter,
    )


def _e(i, dim=4):
    v = [0.0] * dim
    v[i] = 1.0
    return v


class CountingChat:
    def __init__(self):
        self.calls = []

    def chat(self, request: ChatRequest, adapter=None):
        prompt = request.last_user_content()
        self.calls.append((prompt, adapter))
        if "[task: critique]" in prompt:
            return "1. Mention the term 'focus'."
        if "[task: revise-with-critique]" in prompt:
            return "revised final answer"
        return f"base answer to: {prompt[:30]}"


class TestRoute:
    def test_exact_centroid_distance_zero(self):
        emb = TableEmbedder({"q": _e(0)})
        clusters = [_cluster(0, _e(0)), _cluster(1, _e(1))]
        decision = route("qid", "q", emb, clusters, outlier_distance=1.2)
        assert decision.chosen_cluster == 0
        assert decision.distance == 0.0

    def test_boundary_just_inside_routes(self):
        emb = TableEmbedder({"q": _unit_at_distance(1.19)})
        decision = route("qid", "q", emb, [_cluster(0, _e(0))], outlier_distance=1.2)
        assert decision.path is not RoutePath.FALLBACK or decision.chosen_cluster is not None
        assert decision.chosen_cluster == 0
        assert decision.distance == pytest.approx(1.19, abs=1e-9)

    def test_boundary_just_outside_falls_back(self):
        emb = TableEmbedder({"q": _unit_at_distance(1.21)})
        decision = route("qid", "q", emb, [_cluster(0, _e(0))], outlier_distance=1.2)
        assert decision.path is RoutePath.FALLBACK
        assert decision.chosen_cluster is None
        assert decision.distance == pytest.approx(1.21, abs=1e-9)

    def test_equidistant_tie_takes_lower_cluster_id(self):
        q = [1 / math.sqrt(2), 1 / math.sqrt(2), 0.0, 0.0]
        emb = TableEmbedder({"q": q})
        clusters = [_cluster(5, _e(1)), _cluster(2, _e(0))]
        decision = route("qid", "q", emb, clusters, outlier_distance=2.0)
        assert decision.chosen_cluster == 2

    def test_no_clusters_is_fallback(self):
        emb = TableEmbedder({"q": _e(0)})
        decision = route("qid", "q", emb, [], outlier_distance=1.2)
        assert decision.path is RoutePath.FALLBACK
        assert decision.distance == float("inf")

    def test_path_follows_cluster_status(self):
        expert = AdapterHandle(AdapterKind.EXPERT, "ref-e", 1, {"win_rate": 0.9})
        critic = AdapterHandle(AdapterKind.CRITIC, "ref-c", 1)
        emb = TableEmbedder({"p": _e(0), "r": _e(1), "f": _e(2)})
        clusters = [
            _cluster(0, _e(0), ClusterStatus.PRIMARY, expert),
            _cluster(1, _e(1), ClusterStatus.REFLECTIVE, critic),
            _cluster(2, _e(2), ClusterStatus.FALLBACK),
        ]
        assert route("a", "p", emb, clusters, 1.2).path is RoutePath.PRIMARY
        assert route("b", "r", emb, clusters, 1.2).path is RoutePath.REFLECTIVE
        assert route("c", "f", emb, clusters, 1.2).path is RoutePath.FALLBACK

    def test_pure_function_of_inputs(self):
        emb = TableEmbedder({"q": _unit_at_distance(0.7)})
        clusters = [_cluster(0, _e(0)), _cluster(1, _e(1))]
        first = route("qid", "q", emb, clusters, 1.2)
        second = route("qid", "q", emb, clusters, 1.2)
        assert first == second

    def test_argmin_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            dim = 6
            centroids = rng.normal(size=(4, dim))
            centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
            qvec = rng.normal(size=dim)
            emb = TableEmbedder({"q": qvec})
            clusters = [_cluster(i, centroids[i], dim=dim) for i in range(4)]
            decision = route("qid", "q", emb, clusters, outlier_distance=10.0)
            unit_q = qvec / np.linalg.norm(qvec)
            dists = np.linalg.norm(centroids - unit_q, axis=1)
            for transform in (lambda x: x**2, lambda x: 3 * x + 1, np.exp):
                assert int(np.argmin(transform(dists))) == decision.chosen_cluster


class TestRespond:
    def _clusters(self):
        expert = AdapterHandle(AdapterKind.EXPERT, "ref-expert", 2, {"win_rate": 0.8})
        critic = AdapterHandle(AdapterKind.CRITIC, "ref-critic", 3)
        return [
            _cluster(0, _e(0), ClusterStatus.PRIMARY, expert),
            _cluster(1, _e(1), ClusterStatus.REFLECTIVE, critic),
            _cluster(2, _e(2), ClusterStatus.FALLBACK),
        ]

    def test_primary_path_exactly_one_call_with_expert_ref(self):
        chat = CountingChat()
        decision = RouteDecision("q1", 0, 0.1, RoutePath.PRIMARY)
        result = respond("the query", decision, self._clusters(), chat, CFG)
        assert len(chat.calls) == 1
        assert chat.calls[0][1] == "ref-expert"
        assert result.trace[0].purpose == "expert"

    def test_reflective_path_three_calls_base_critic_base(self):
        chat = CountingChat()
        decision = RouteDecision("q1", 1, 0.1, RoutePath.REFLECTIVE)
        result = respond("the query", decision, self._clusters(), chat, CFG)
        assert [a for _, a in chat.calls] == [None, "ref-critic", None]
        assert [t.purpose for t in result.trace] == ["base", "critic", "base"]
        # the critique prompt carries the draft; the final revision carries both
        assert "the query" in chat.calls[1][0]
        assert result.response == "revised final answer"

    def test_fallback_byte_equal_to_base_policy(self):
        chat = CountingChat()
        decision = RouteDecision("q1", None, 5.0, RoutePath.FALLBACK)
        result = respond("the query", decision, self._clusters(), chat, CFG)
        direct = CountingChat().chat(ChatRequest.user("the query", temperature=CFG.temperature))
        assert result.response == direct
        assert len(chat.calls) == 1

    def test_missing_adapter_degrades_to_fallback(self):
        chat = CountingChat()
        clusters = [_cluster(0, _e(0), ClusterStatus.FALLBACK)]
        decision = RouteDecision("q1", 0, 0.1, RoutePath.PRIMARY)  # stale decision
        result = respond("q", decision, clusters, chat, CFG)
        assert result.trace[0].purpose == "base"
        assert len(chat.calls) == 1

    def test_trace_refs_exist_in_registry(self):
        chat = CountingChat()
        clusters = self._clusters()
        registry = {c.adapter.backend_ref for c in clusters if c.adapter}
        for cid, path in ((0, RoutePath.PRIMARY), (1, RoutePath.REFLECTIVE)):
            decision = RouteDecision("q", cid, 0.1, path)
            result = respond("q", decision, clusters, chat, CFG)
            for entry in result.trace:
                if entry.adapter is not None:
                    assert entry.adapter in registry

    def test_route_and_respond_end_to_end(self):
        emb = TableEmbedder({"q": _e(0)})
        chat = CountingChat()
        result = route_and_respond("qid", "q", emb, self._clusters(), chat, CFG)
        assert result.decision.path is RoutePath.PRIMARY
        assert result.response.startswith("base answer")  # stub echoes
