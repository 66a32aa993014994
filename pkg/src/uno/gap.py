"""Cognitive gap scoring and cluster profiling.

The base model predicts rules from the query alone (never the logged
trajectory); a reranker scores each distilled rule's independence from
those predictions, and the minimum over distilled rules is the session's
gap.  Cluster means against the threshold split low-gap from high-gap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

from .backends.base import ChatBackend, ChatRequest, RerankBackend, RerankStats, rerank_score
from .config import EngineConfig
from .distillation import parse_rule_list
from .prompts import render
from .types import GapClass, GapProfile, RuleSet, RuleSource


def predict_rules(query: str, chat: ChatBackend, config: EngineConfig) -> RuleSet:
    """Rules the base policy expects for this query, predicted without any
    access to the logged feedback."""
    if not query:
        raise ValueError("cannot predict rules for an empty query")
    prompt = render("predict_rules", query=query)
    answer = chat.chat(ChatRequest.user(prompt, temperature=config.temperature))
    rules, _ = parse_rule_list(answer)
    return RuleSet(rules=rules, source=RuleSource.PREDICTED)


def gap_score(
    distilled: RuleSet,
    predicted: RuleSet,
    reranker: RerankBackend,
    stats: Optional[RerankStats] = None,
) -> float:
    """Min over distilled rules of their independence from the predicted
    set.  An empty prediction means the model articulated no cognition at
    all, so the gap is maximal."""
    if not distilled:
        raise ValueError("gap score requires a non-empty distilled rule set")
    if not predicted:
        return 1.0
    return min(rerank_score(reranker, rule, predicted.rules, stats) for rule in distilled.rules)


def profile_cluster(
    cluster_id: int, gaps: Mapping[str, float], tau_star: float
) -> GapProfile:
    """Arithmetic mean of member gaps; a mean at or below tau_star
    classifies low-gap."""
    if not gaps:
        raise ValueError("cannot profile a cluster with no gap scores")
    mean = sum(gaps.values()) / len(gaps)
    classification = GapClass.LOW if mean <= tau_star else GapClass.HIGH
    return GapProfile(
        cluster_id=cluster_id,
        per_session_gaps=dict(sorted(gaps.items())),
        mean=mean,
        classification=classification,
    )


@dataclass(frozen=True)
class RiskBoundInput:
    """Inputs to the posterior noise bound: prior of high-quality data and
    the low-gap tail masses of each mixture component."""

    alpha: float
    p_h: float
    p_n: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")
        if not 0.0 < self.p_h <= 1.0:
            raise ValueError(f"p_h must lie in (0,1], got {self.p_h}")
        if not 0.0 <= self.p_n <= 1.0:
            raise ValueError(f"p_n must lie in [0,1], got {self.p_n}")


def noise_risk_bound(inp: RiskBoundInput) -> float:
    """Upper bound on P(noise | gap <= tau): 1 / (1 + alpha * p_h / p_n).
    No noise mass below tau means the posterior is 0."""
    if inp.p_n == 0.0:
        return 0.0
    return 1.0 / (1.0 + inp.alpha * inp.p_h / inp.p_n)


def assess_cluster(
    cluster_id: int,
    member_rules: Mapping[str, RuleSet],
    member_queries: Mapping[str, str],
    chat: ChatBackend,
    reranker: RerankBackend,
    config: EngineConfig,
    stats: Optional[RerankStats] = None,
) -> GapProfile:
    """Predict rules and score the gap for every member, then profile."""
    gaps = {}
    for session_id in sorted(member_rules):
        predicted = predict_rules(member_queries[session_id], chat, config)
        gaps[session_id] = gap_score(member_rules[session_id], predicted, reranker, stats)
    return profile_cluster(cluster_id, gaps, config.tau_star)
