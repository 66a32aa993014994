"""Domain types shared by every pipeline stage.

All types are frozen dataclasses: once constructed they are immutable and
safe to share across threads.  Each carries ``to_dict`` / ``from_dict`` so
the artifact store can round-trip them losslessly through line-delimited
JSON.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Tuple


class RuleSource(str, Enum):
    DISTILLED = "distilled_from_log"
    PREDICTED = "predicted_by_model"
    CRITIC = "critic_generated"


class ClusterStatus(str, Enum):
    UNASSESSED = "unassessed"
    PRIMARY = "primary"
    REFLECTIVE = "reflective"
    FALLBACK = "fallback"


class AdapterKind(str, Enum):
    EXPERT = "expert"
    CRITIC = "critic"


class GapClass(str, Enum):
    LOW = "low_gap"
    HIGH = "high_gap"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"


@dataclass(frozen=True)
class Turn:
    """One feedback exchange inside a session trajectory."""

    user_input: str
    model_response: str = ""

    def __post_init__(self) -> None:
        if not self.user_input:
            raise ValueError("turn user_input must be non-empty")

    def to_dict(self) -> dict:
        return {"user_input": self.user_input, "model_response": self.model_response}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Turn":
        return cls(user_input=d["user_input"], model_response=d.get("model_response", ""))


@dataclass(frozen=True)
class Session:
    """One logged interaction: query, initial response, feedback trajectory.

    The trajectory may be empty; sessions are only filtered downstream,
    never at construction time.
    """

    id: str
    query: str
    initial_response: str
    trajectory: Tuple[Turn, ...] = ()
    language_tag: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("session id must be non-empty")
        if not self.query:
            raise ValueError("session query must be non-empty")

    @property
    def turn_count(self) -> int:
        return len(self.trajectory)

    def to_dict(self) -> dict:
        d: dict = {
            "id": self.id,
            "query": self.query,
            "initial_response": self.initial_response,
            "trajectory": [t.to_dict() for t in self.trajectory],
        }
        if self.language_tag is not None:
            d["language_tag"] = self.language_tag
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Session":
        return cls(
            id=d["id"],
            query=d["query"],
            initial_response=d.get("initial_response", ""),
            trajectory=tuple(Turn.from_dict(t) for t in d.get("trajectory", ())),
            language_tag=d.get("language_tag"),
        )


@dataclass(frozen=True)
class RuleSet:
    """Ordered list of editing rules plus where they came from.

    An empty rule list is legal only transiently, before the empty-rule-set
    filter runs.
    """

    rules: Tuple[str, ...]
    source: RuleSource

    def __post_init__(self) -> None:
        for r in self.rules:
            if not r or r != r.strip():
                raise ValueError(f"rules must be non-empty trimmed strings, got {r!r}")

    def __len__(self) -> int:
        return len(self.rules)

    def __bool__(self) -> bool:
        return bool(self.rules)

    def joined(self) -> str:
        return "\n".join(self.rules)

    def to_dict(self) -> dict:
        return {"rules": list(self.rules), "source": self.source.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RuleSet":
        return cls(rules=tuple(d["rules"]), source=RuleSource(d["source"]))


@dataclass(frozen=True)
class PreferencePair:
    """(query, chosen, rejected, rules) training record.

    ``rejected`` is always the session's logged initial response.  ``split``
    stays None until cluster-level splits are assigned.
    """

    session_id: str
    query: str
    chosen: str
    rejected: str
    rules: RuleSet
    split: Optional[Split] = None

    def __post_init__(self) -> None:
        if self.chosen == self.rejected:
            raise ValueError("preference pair chosen must differ from rejected")
        if not self.rules:
            raise ValueError("preference pair requires a non-empty rule set")

    def with_split(self, split: Split) -> "PreferencePair":
        return PreferencePair(
            session_id=self.session_id,
            query=self.query,
            chosen=self.chosen,
            rejected=self.rejected,
            rules=self.rules,
            split=split,
        )

    def to_dict(self) -> dict:
        d: dict = {
            "session_id": self.session_id,
            "query": self.query,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "rules": self.rules.to_dict(),
        }
        if self.split is not None:
            d["split"] = self.split.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PreferencePair":
        split = d.get("split")
        return cls(
            session_id=d["session_id"],
            query=d["query"],
            chosen=d["chosen"],
            rejected=d["rejected"],
            rules=RuleSet.from_dict(d["rules"]),
            split=Split(split) if split is not None else None,
        )


@dataclass(frozen=True)
class AdapterHandle:
    """Pointer to a trained artifact living at the trainer backend."""

    kind: AdapterKind
    backend_ref: str
    epoch: int
    metrics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.epoch < 1:
            raise ValueError(f"adapter epoch must be >= 1, got {self.epoch}")
        if self.kind is AdapterKind.EXPERT and "win_rate" not in self.metrics:
            raise ValueError("expert adapters must carry a win_rate metric")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "backend_ref": self.backend_ref,
            "epoch": self.epoch,
            "metrics": dict(self.metrics),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AdapterHandle":
        return cls(
            kind=AdapterKind(d["kind"]),
            backend_ref=d["backend_ref"],
            epoch=d["epoch"],
            metrics=dict(d.get("metrics", {})),
        )


_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ClusterRecord:
    """One cluster: members, centroids, gap profile and module binding."""

    cluster_id: int
    member_session_ids: Tuple[str, ...]
    centroid_full: Tuple[float, ...]
    centroid_query: Tuple[float, ...]
    gap_mean: Optional[float] = None
    status: ClusterStatus = ClusterStatus.UNASSESSED
    adapter: Optional[AdapterHandle] = None

    def __post_init__(self) -> None:
        if not self.member_session_ids:
            raise ValueError("cluster member list must be non-empty")
        norm = sum(v * v for v in self.centroid_query) ** 0.5
        if abs(norm - 1.0) > _UNIT_NORM_TOL:
            raise ValueError(f"centroid_query must have unit L2 norm, got {norm}")
        if self.gap_mean is not None and not 0.0 <= self.gap_mean <= 1.0:
            raise ValueError(f"gap_mean must lie in [0,1], got {self.gap_mean}")
        if self.status is ClusterStatus.PRIMARY:
            if self.adapter is None or self.adapter.kind is not AdapterKind.EXPERT:
                raise ValueError("primary cluster requires an expert adapter")
        if self.status is ClusterStatus.REFLECTIVE:
            if self.adapter is None or self.adapter.kind is not AdapterKind.CRITIC:
                raise ValueError("reflective cluster requires a critic adapter")

    def evolved(
        self,
        gap_mean: Optional[float] = None,
        status: Optional[ClusterStatus] = None,
        adapter: Optional[AdapterHandle] = None,
    ) -> "ClusterRecord":
        """Copy with updated assessment/build fields."""
        return ClusterRecord(
            cluster_id=self.cluster_id,
            member_session_ids=self.member_session_ids,
            centroid_full=self.centroid_full,
            centroid_query=self.centroid_query,
            gap_mean=self.gap_mean if gap_mean is None else gap_mean,
            status=self.status if status is None else status,
            adapter=self.adapter if adapter is None else adapter,
        )

    def to_dict(self) -> dict:
        d: dict = {
            "cluster_id": self.cluster_id,
            "member_session_ids": list(self.member_session_ids),
            "centroid_full": list(self.centroid_full),
            "centroid_query": list(self.centroid_query),
            "status": self.status.value,
        }
        if self.gap_mean is not None:
            d["gap_mean"] = self.gap_mean
        if self.adapter is not None:
            d["adapter"] = self.adapter.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ClusterRecord":
        adapter = d.get("adapter")
        return cls(
            cluster_id=d["cluster_id"],
            member_session_ids=tuple(d["member_session_ids"]),
            centroid_full=tuple(d["centroid_full"]),
            centroid_query=tuple(d["centroid_query"]),
            gap_mean=d.get("gap_mean"),
            status=ClusterStatus(d["status"]),
            adapter=AdapterHandle.from_dict(adapter) if adapter else None,
        )


@dataclass(frozen=True)
class GapProfile:
    """Per-cluster cognitive gap summary."""

    cluster_id: int
    per_session_gaps: Mapping[str, float]
    mean: float
    classification: GapClass

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "per_session_gaps": dict(self.per_session_gaps),
            "mean": self.mean,
            "classification": self.classification.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GapProfile":
        return cls(
            cluster_id=d["cluster_id"],
            per_session_gaps=dict(d["per_session_gaps"]),
            mean=d["mean"],
            classification=GapClass(d["classification"]),
        )


class DistillDecision(str, Enum):
    # dropped_* variants beyond the two trajectory/rule drops exist so the
    # conservation invariant |corpus| == drops + pairs stays exact.
    DROPPED_EMPTY_TRAJECTORY = "dropped_empty_trajectory"
    DROPPED_EMPTY_RULES = "dropped_empty_rules"
    DROPPED_REWARD_HACKING = "dropped_reward_hacking"
    DROPPED_DEGENERATE_PAIR = "dropped_degenerate_pair"
    KEPT = "kept"


@dataclass(frozen=True)
class DistillationOutcome:
    """Result of stage 1 for a single session."""

    session_id: str
    decision: DistillDecision
    rules: Optional[RuleSet] = None
    pair: Optional[PreferencePair] = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.decision is DistillDecision.KEPT:
            if self.rules is None or not self.rules or self.pair is None:
                raise ValueError("kept outcome requires non-empty rules and a pair")

    def to_dict(self) -> dict:
        d: dict = {"session_id": self.session_id, "decision": self.decision.value}
        if self.rules is not None:
            d["rules"] = self.rules.to_dict()
        if self.pair is not None:
            d["pair"] = self.pair.to_dict()
        if self.detail:
            d["detail"] = self.detail
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DistillationOutcome":
        rules = d.get("rules")
        pair = d.get("pair")
        return cls(
            session_id=d["session_id"],
            decision=DistillDecision(d["decision"]),
            rules=RuleSet.from_dict(rules) if rules else None,
            pair=PreferencePair.from_dict(pair) if pair else None,
            detail=d.get("detail", ""),
        )


class RoutePath(str, Enum):
    PRIMARY = "primary"
    REFLECTIVE = "reflective"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class RouteDecision:
    """Outcome of nearest-centroid matching for one query."""

    query_id: str
    chosen_cluster: Optional[int]
    distance: float
    path: RoutePath

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "chosen_cluster": self.chosen_cluster,
            "distance": self.distance,
            "path": self.path.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RouteDecision":
        return cls(
            query_id=d["query_id"],
            chosen_cluster=d.get("chosen_cluster"),
            distance=d["distance"],
            path=RoutePath(d["path"]),
        )


@dataclass(frozen=True)
class VerifierReport:
    """Per-cluster simulated-verifier outcome across training epochs."""

    cluster_id: int
    per_epoch_win_rates: Tuple[float, ...]
    best_epoch: int
    win_rate_best: float
    accepted: bool

    def __post_init__(self) -> None:
        if self.per_epoch_win_rates:
            if abs(self.win_rate_best - max(self.per_epoch_win_rates)) > 1e-12:
                raise ValueError("win_rate_best must equal the max per-epoch win rate")

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "per_epoch_win_rates": list(self.per_epoch_win_rates),
            "best_epoch": self.best_epoch,
            "win_rate_best": self.win_rate_best,
            "accepted": self.accepted,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "VerifierReport":
        return cls(
            cluster_id=d["cluster_id"],
            per_epoch_win_rates=tuple(d["per_epoch_win_rates"]),
            best_epoch=d["best_epoch"],
            win_rate_best=d["win_rate_best"],
            accepted=d["accepted"],
        )


@dataclass(frozen=True)
class IngestReject:
    """A malformed log record, kept for the error report."""

    line: int
    reason: str

    def to_dict(self) -> dict:
        return {"line": self.line, "reason": self.reason}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "IngestReject":
        return cls(line=d["line"], reason=d["reason"])
