"""HTTP clients for the four model services.

Chat and embeddings follow the common chat-completions / embeddings JSON
conventions; reranker and trainer speak the bespoke protocol documented in
the README (POST /rerank; POST /train, GET /jobs/{id}, POST /generate).

Every client retries transient failures up to ``retries`` attempts with
exponential backoff and bounds its number of in-flight requests.
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Any, Optional, Sequence

import httpx
import numpy as np

from .base import (
    ChatRequest,
    CheckpointInfo,
    ConsistencyError,
    JobState,
    JobStatus,
    ProtocolError,
    RetryableError,
    TrainJobSpec,
)

logger = logging.getLogger(__name__)

_RETRYABLE_STATUS = (429, 500, 502, 503, 504)


class _HttpService:
    def __init__(
        self,
        base_url: str,
        retries: int = 3,
        backoff: float = 0.25,
        max_in_flight: int = 8,
        timeout: float = 60.0,
        api_key: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), timeout=timeout, headers=headers, transport=transport
        )
        self.retries = retries
        self.backoff = backoff
        self.attempts_logged = 0
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> Any:
        last_error: Exception | None = None
        for attempt in range(1, self.retries + 1):
            self.attempts_logged += 1
            try:
                with self._gate:
                    resp = self._client.request(method, path, json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                logger.warning("attempt %d/%d to %s failed: %s", attempt, self.retries, path, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** (attempt - 1)))
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = RetryableError(f"{path} returned HTTP {resp.status_code}")
                logger.warning("attempt %d/%d to %s: HTTP %d", attempt, self.retries, path, resp.status_code)
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** (attempt - 1)))
                continue
            if resp.status_code >= 400:
                detail = resp.text[:500]
                raise ProtocolError(f"{path} returned HTTP {resp.status_code}: {detail}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{path} returned non-JSON body: {exc}")
        raise RetryableError(f"{path} failed after {self.retries} attempts: {last_error}")


class HttpChatBackend(_HttpService):
    """Chat-completions client.  An adapter ref is addressed through the
    ``model`` field, the convention LoRA-serving stacks use."""

    def __init__(self, base_url: str, model: str = "base-policy", **kwargs: Any):
        super().__init__(base_url, **kwargs)
        self.model = model

    def chat(self, request: ChatRequest, adapter: Optional[str] = None) -> str:
        payload = {
            "model": adapter if adapter is not None else self.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        data = self._request("POST", "/v1/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat completion response: {exc}")


class HttpEmbeddingBackend(_HttpService):
    def __init__(self, base_url: str, model: str = "sentence-encoder", **kwargs: Any):
        super().__init__(base_url, **kwargs)
        self.model = model
        self._dim: Optional[int] = None

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed requires a non-empty list of texts")
        data = self._request("POST", "/v1/embeddings", {"model": self.model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [np.asarray(r["embedding"], dtype=float) for r in rows]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embeddings response: {exc}")
        if len(vectors) != len(texts):
            raise ProtocolError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        for vec in vectors:
            if self._dim is None:
                self._dim = vec.shape[0]
            elif vec.shape[0] != self._dim:
                raise ConsistencyError(
                    f"embedding dimension drifted from {self._dim} to {vec.shape[0]} mid-run"
                )
            if not np.all(np.isfinite(vec)):
                raise ProtocolError("embedding contains non-finite entries")
        return vectors


class HttpRerankBackend(_HttpService):
    def score(self, rule: str, against: Sequence[str]) -> float:
        if not against:
            raise ValueError("rerank requires a non-empty reference set")
        data = self._request("POST", "/rerank", {"query": rule, "documents": list(against)})
        try:
            return float(data["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed rerank response: {exc}")


class HttpTrainerBackend(_HttpService):
    def __init__(self, base_url: str, poll_interval: float = 0.2, **kwargs: Any):
        super().__init__(base_url, **kwargs)
        self.poll_interval = poll_interval

    def submit(self, spec: TrainJobSpec) -> str:
        spec.validate()
        data = self._request("POST", "/train", spec.to_dict())
        try:
            return data["job_id"]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed train response: {exc}")

    def poll(self, job_id: str) -> JobStatus:
        data = self._request("GET", f"/jobs/{job_id}")
        try:
            return JobStatus(
                job_id=data["job_id"],
                state=JobState(data["status"]),
                checkpoints=tuple(CheckpointInfo.from_dict(c) for c in data.get("checkpoints", ())),
                message=data.get("message", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed job status response: {exc}")

    def generate(self, messages: Sequence[dict], adapter: Optional[str], temperature: float, max_tokens: int) -> str:
        payload = {
            "adapter": adapter,
            "messages": list(messages),
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        data = self._request("POST", "/generate", payload)
        try:
            return data["text"]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed generate response: {exc}")


class CompositeChatBackend:
    """Base-policy calls go to the chat service; adapter calls go to the
    trainer's /generate endpoint, which hosts the trained artifacts."""

    def __init__(self, base: HttpChatBackend, trainer: HttpTrainerBackend):
        self.base = base
        self.trainer = trainer

    def chat(self, request: ChatRequest, adapter: Optional[str] = None) -> str:
        if adapter is None:
            return self.base.chat(request)
        return self.trainer.generate(
            [m.to_dict() for m in request.messages],
            adapter=adapter,
            temperature=request.temperature,
            max_tokens=request.max_tokens,
        )
