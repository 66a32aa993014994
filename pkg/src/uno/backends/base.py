"""Wire-protocol types and interfaces for all external model services.

Four services exist: chat completion, sentence embedding, rule reranking
and adapter training.  Every engine stage talks to them through the small
protocols below, so the whole pipeline runs identically against HTTP
services or the in-process mocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np


class BackendError(Exception):
    """Base class for all backend failures."""


class RetryableError(BackendError):
    """Transport failure that persisted past the retry budget."""


class ProtocolError(BackendError):
    """The service answered, but not in the agreed shape."""


class ConsistencyError(BackendError):
    """A backend changed behavior mid-run (e.g. embedding dimension drift)."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: Tuple[ChatMessage, ...]
    temperature: float = 0.1
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request requires at least one message")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    @classmethod
    def user(cls, content: str, temperature: float = 0.1, max_tokens: int = 1024) -> "ChatRequest":
        return cls(messages=(ChatMessage("user", content),), temperature=temperature, max_tokens=max_tokens)

    def last_user_content(self) -> str:
        for msg in reversed(self.messages):
            if msg.role == "user":
                return msg.content
        return self.messages[-1].content


class TrainObjective(str, Enum):
    DPO_PLUS_NLL = "dpo_plus_nll"
    NLL = "nll"


@dataclass(frozen=True)
class PairRecord:
    """One preference example on the wire."""

    session_id: str
    query: str
    chosen: str
    rejected: str
    rules: Tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "query": self.query,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "rules": list(self.rules),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PairRecord":
        return cls(
            session_id=d["session_id"],
            query=d["query"],
            chosen=d["chosen"],
            rejected=d["rejected"],
            rules=tuple(d["rules"]),
        )


@dataclass(frozen=True)
class SeqRecord:
    """One (input, target) example for likelihood training."""

    session_id: str
    input_query: str
    input_response: str
    target: str

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "input_query": self.input_query,
            "input_response": self.input_response,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SeqRecord":
        return cls(
            session_id=d["session_id"],
            input_query=d["input_query"],
            input_response=d["input_response"],
            target=d["target"],
        )


@dataclass(frozen=True)
class TrainHyperparams:
    adapter_rank: int = 64
    adapter_dropout: float = 0.05
    learning_rate: float = 5e-4
    epochs: int = 8
    dpo_beta: float = 0.1
    nll_weight: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "adapter_rank": self.adapter_rank,
            "adapter_dropout": self.adapter_dropout,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "dpo_beta": self.dpo_beta,
            "nll_weight": self.nll_weight,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainHyperparams":
        return cls(**dict(d))


@dataclass(frozen=True)
class TrainJobSpec:
    """A training request: preference pairs for dpo_plus_nll, sequence
    records for nll.  Validation records only matter to nll jobs, whose
    checkpoints must report a per-epoch validation loss."""

    objective: TrainObjective
    cluster_id: int
    hyperparams: TrainHyperparams
    pairs: Tuple[PairRecord, ...] = ()
    records: Tuple[SeqRecord, ...] = ()
    validation_records: Tuple[SeqRecord, ...] = ()
    init_from: Optional[str] = None

    def validate(self) -> None:
        if self.objective is TrainObjective.DPO_PLUS_NLL:
            if not self.pairs:
                raise ValueError("dpo_plus_nll jobs require preference pairs")
            if self.records:
                raise ValueError("dpo_plus_nll jobs must not carry sequence records")
        else:
            if not self.records:
                raise ValueError("nll jobs require (input, target) records")
            if self.pairs:
                raise ValueError("nll jobs must not carry preference pairs")

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.value,
            "cluster_id": self.cluster_id,
            "hyperparameters": self.hyperparams.to_dict(),
            "pairs": [p.to_dict() for p in self.pairs],
            "records": [r.to_dict() for r in self.records],
            "validation_records": [r.to_dict() for r in self.validation_records],
            "init_from": self.init_from,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainJobSpec":
        return cls(
            objective=TrainObjective(d["objective"]),
            cluster_id=d["cluster_id"],
            hyperparams=TrainHyperparams.from_dict(d["hyperparameters"]),
            pairs=tuple(PairRecord.from_dict(p) for p in d.get("pairs", ())),
            records=tuple(SeqRecord.from_dict(r) for r in d.get("records", ())),
            validation_records=tuple(SeqRecord.from_dict(r) for r in d.get("validation_records", ())),
            init_from=d.get("init_from"),
        )


@dataclass(frozen=True)
class CheckpointInfo:
    job_id: str
    epoch: int
    backend_ref: str
    validation_loss: Optional[float] = None
    metrics: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "epoch": self.epoch,
            "backend_ref": self.backend_ref,
            "validation_loss": self.validation_loss,
            "metrics": dict(self.metrics),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CheckpointInfo":
        return cls(
            job_id=d["job_id"],
            epoch=d["epoch"],
            backend_ref=d["backend_ref"],
            validation_loss=d.get("validation_loss"),
            metrics=dict(d.get("metrics", {})),
        )


class JobState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class JobStatus:
    job_id: str
    state: JobState
    checkpoints: Tuple[CheckpointInfo, ...] = ()
    message: str = ""


@runtime_checkable
class ChatBackend(Protocol):
    def chat(self, request: ChatRequest, adapter: Optional[str] = None) -> str:
        """Generate text; with ``adapter`` set, use that trained artifact."""
        ...


@runtime_checkable
class EmbeddingBackend(Protocol):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        """One fixed-dimension vector per input text."""
        ...


@runtime_checkable
class RerankBackend(Protocol):
    def score(self, rule: str, against: Sequence[str]) -> float:
        """Independence of ``rule`` from the rules in ``against``, raw."""
        ...


@runtime_checkable
class TrainerBackend(Protocol):
    def submit(self, spec: TrainJobSpec) -> str:
        ...

    def poll(self, job_id: str) -> JobStatus:
        ...


class RerankStats:
    """Counts out-of-range reranker scores that had to be clamped."""

    def __init__(self) -> None:
        self.clamped = 0

    def to_dict(self) -> dict:
        return {"clamped": self.clamped}


def rerank_score(
    backend: RerankBackend,
    rule: str,
    against: Sequence[str],
    stats: Optional[RerankStats] = None,
) -> float:
    """Bounded independence score in [0, 1].

    Out-of-range backend values are clamped, logged and counted rather
    than failing the run.
    """
    if not against:
        raise ValueError("rerank requires a non-empty rule set to score against")
    raw = float(backend.score(rule, against))
    if raw < 0.0 or raw > 1.0:
        import logging

        logging.getLogger(__name__).warning(
            "reranker returned out-of-range score %.4f for rule %r; clamping", raw, rule
        )
        if stats is not None:
            stats.clamped += 1
        raw = min(1.0, max(0.0, raw))
    return raw
