"""Pluggable model-service backends: wire protocols, HTTP clients, mocks."""

from .base import (
    BackendError,
    ChatBackend,
    ChatMessage,
    ChatRequest,
    CheckpointInfo,
    ConsistencyError,
    EmbeddingBackend,
    JobState,
    JobStatus,
    PairRecord,
    ProtocolError,
    RerankBackend,
    RerankStats,
    RetryableError,
    SeqRecord,
    TrainHyperparams,
    TrainJobSpec,
    TrainObjective,
    TrainerBackend,
    rerank_score,
)
from .mocks import (
    AdapterBlob,
    EchoChat,
    HashingEmbedder,
    MockBackendSet,
    MockChatBackend,
    MockModelHub,
    MockTrainerBackend,
    OverlapReranker,
    ScriptedChat,
    TableEmbedder,
    TableReranker,
    build_mock_backends,
)

__all__ = [
    "AdapterBlob",
    "BackendError",
    "ChatBackend",
    "ChatMessage",
    "ChatRequest",
    "CheckpointInfo",
    "ConsistencyError",
    "EchoChat",
    "EmbeddingBackend",
    "HashingEmbedder",
    "JobState",
    "JobStatus",
    "MockBackendSet",
    "MockChatBackend",
    "MockModelHub",
    "MockTrainerBackend",
    "OverlapReranker",
    "PairRecord",
    "ProtocolError",
    "RerankBackend",
    "RerankStats",
    "RetryableError",
    "ScriptedChat",
    "SeqRecord",
    "TableEmbedder",
    "TableReranker",
    "TrainHyperparams",
    "TrainJobSpec",
    "TrainObjective",
    "TrainerBackend",
    "build_mock_backends",
    "rerank_score",
]
