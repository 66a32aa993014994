"""Deterministic in-process backends.

These mirror the HTTP services exactly (same semantics, same error
behavior) while staying pure functions of (seed, request).  The chat mock
dispatches on the task marker that heads every engine prompt template, so
it can play distiller, reviser, judge, critic and base policy at once.

A "world" object (optionally provided by the synthetic-log simulator)
gives the mock family prior knowledge about query topics; without one the
mocks still behave sensibly but predict no rules.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from ..prompts import task_marker
from .base import (
    ChatRequest,
    CheckpointInfo,
    JobState,
    JobStatus,
    ProtocolError,
    TrainJobSpec,
    TrainObjective,
)

QUOTED_TERM_RE = re.compile(r"'([^']+)'")
DIRECTIVE_RE = re.compile(r"please ([^.!?\n]+)", re.IGNORECASE)


def _hash_int(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


def quoted_terms(text: str) -> Tuple[str, ...]:
    return tuple(QUOTED_TERM_RE.findall(text))


def _between(text: str, start: str, end: Optional[str] = None) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return text[i:j].strip() if j >= 0 else text[i:].strip()


class MockWorld(Protocol):
    """What the teachable mock family knows about the synthetic domain."""

    def base_answer(self, query: str) -> str:
        ...

    def prior_rules(self, query: str) -> Tuple[str, ...]:
        ...

    def hidden_keywords(self, query: str) -> Tuple[str, ...]:
        ...


# ---------------------------------------------------------------------------
# Embeddings


class HashingEmbedder:
    """Bag-of-words feature hashing plus a small whole-text component.

    Texts sharing vocabulary land close together; the whole-text component
    guarantees distinct texts never collide exactly.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.dim = dim
        self.seed = seed

    def _token_vec(self, token: str) -> np.ndarray:
        h = _hash_int(str(self.seed), "tok", token)
        vec = np.zeros(self.dim)
        idx = h % self.dim
        sign = 1.0 if (h >> 8) % 2 == 0 else -1.0
        vec[idx] = sign
        return vec

    def _text_vec(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for token in text.lower().split():
            vec += self._token_vec(token)
        h = _hash_int(str(self.seed), "all", text)
        vec[h % self.dim] += 0.01 if (h >> 8) % 2 == 0 else -0.01
        return vec

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed requires a non-empty list of texts")
        return [self._text_vec(t) for t in texts]


class TableEmbedder:
    """Fixed text -> vector mapping for routing tests."""

    def __init__(self, table: Mapping[str, Sequence[float]], default: Optional[Sequence[float]] = None):
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        self.default = np.asarray(default, dtype=float) if default is not None else None

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed requires a non-empty list of texts")
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t].copy())
            elif self.default is not None:
                out.append(self.default.copy())
            else:
                raise KeyError(f"no embedding scripted for {t!r}")
        return out


# ---------------------------------------------------------------------------
# Reranker

_STOPWORDS = frozenset(
    """a an and are as at be but by for from in into is it its of on or that the
    their this to was when which will with you your always never please remember
    term mention responding respond answer use""".split()
)


def _content_tokens(text: str) -> frozenset:
    toks = re.findall(r"[a-z0-9]+(?:'[a-z0-9]+)?", text.lower())
    content = frozenset(t for t in toks if t not in _STOPWORDS)
    return content if content else frozenset(toks)


class OverlapReranker:
    """Independence via content-token Jaccard overlap.

    A rule textually identical to one in the reference set scores 0.0
    (fully dependent); a rule sharing no content tokens scores 1.0.
    """

    def score(self, rule: str, against: Sequence[str]) -> float:
        if not against:
            raise ValueError("rerank requires a non-empty reference set")
        mine = _content_tokens(rule)
        best = 0.0
        for other in against:
            if rule.strip() == other.strip():
                return 0.0
            theirs = _content_tokens(other)
            union = mine | theirs
            sim = len(mine & theirs) / len(union) if union else 1.0
            best = max(best, sim)
        return 1.0 - best


class TableReranker:
    """Fixed (rule -> score) mapping; may return out-of-range values to
    exercise the clamping path."""

    def __init__(self, table: Mapping[str, float], default: float = 0.5):
        self.table = dict(table)
        self.default = default

    def score(self, rule: str, against: Sequence[str]) -> float:
        if not against:
            raise ValueError("rerank requires a non-empty reference set")
        return self.table.get(rule, self.default)


# ---------------------------------------------------------------------------
# Adapter hub shared between mock trainer and mock chat


@dataclass(frozen=True)
class AdapterBlob:
    kind: str  # "expert" | "critic"
    keywords: Tuple[str, ...]
    cluster_id: int
    epoch: int


class MockModelHub:
    """Registry of mock-trained adapters, keyed by backend_ref.

    With a path set, the hub persists to a JSON file so that mock-trained
    artifacts survive across processes, the way a real trainer service
    retains its checkpoints."""

    def __init__(self, path: "str | None" = None) -> None:
        self._blobs: dict[str, AdapterBlob] = {}
        self._path = path
        if path is not None:
            self._load()

    def _load(self) -> None:
        import json
        import os

        if self._path and os.path.exists(self._path):
            with open(self._path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
            for ref, d in raw.items():
                self._blobs[ref] = AdapterBlob(
                    kind=d["kind"],
                    keywords=tuple(d["keywords"]),
                    cluster_id=d["cluster_id"],
                    epoch=d["epoch"],
                )

    def _flush(self) -> None:
        import json

        if self._path is None:
            return
        payload = {
            ref: {
                "kind": blob.kind,
                "keywords": list(blob.keywords),
                "cluster_id": blob.cluster_id,
                "epoch": blob.epoch,
            }
            for ref, blob in sorted(self._blobs.items())
        }
        with open(self._path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)

    def register(self, ref: str, blob: AdapterBlob) -> None:
        self._blobs[ref] = blob
        self._flush()

    def get(self, ref: str) -> AdapterBlob:
        if ref not in self._blobs:
            raise ProtocolError(f"unknown adapter ref: {ref}")
        return self._blobs[ref]

    def __contains__(self, ref: str) -> bool:
        return ref in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)


# ---------------------------------------------------------------------------
# Chat


def extract_directives(trajectory_text: str) -> Tuple[str, ...]:
    """Pull 'please ...' directives out of rendered feedback turns."""
    rules = []
    for line in trajectory_text.splitlines():
        if not line.strip().lower().startswith("user:"):
            continue
        for m in DIRECTIVE_RE.finditer(line):
            clause = m.group(1).strip()
            if clause:
                rules.append(clause[0].upper() + clause[1:] + ".")
    return tuple(rules)


def _numbered(rules: Sequence[str]) -> str:
    return "\n".join(f"{i}. {r}" for i, r in enumerate(rules, start=1))


def _keyword_sentences(terms: Sequence[str]) -> str:
    return " ".join(f"Be sure to address '{t}'." for t in terms)


_JUDGE_FORMATS = (
    "The answer lines up with the rules to a fair degree.\nScore: {s}",
    "Coverage of the required points is partial. Final score: {s}.",
    "I would rate this {s}/10.",
    "Rating: {s} out of 10.",
    "[[{s}]] after weighing each rule.",
    "Overall the quality merits a score of {s}.",
)


class MockChatBackend:
    """Deterministic template-aware chat mock.

    judge_mode selects how the judge task scores a response:
      * ``rules``        -- coverage of the quoted terms in the provided rules
      * ``honest_noise`` -- coverage of the world's hidden target keywords,
                            making the base policy always score >= a
                            checkpoint trained on noise
    A custom ``judge_fn(query, rules_text, response, sample_index) -> int``
    overrides both.
    """

    def __init__(
        self,
        hub: Optional[MockModelHub] = None,
        world: Optional[MockWorld] = None,
        seed: int = 0,
        judge_mode: str = "rules",
        judge_fn: Optional[Callable[[str, str, str, int], int]] = None,
    ):
        if judge_mode not in ("rules", "honest_noise"):
            raise ValueError(f"unknown judge_mode: {judge_mode}")
        self.hub = hub if hub is not None else MockModelHub()
        self.world = world
        self.seed = seed
        self.judge_mode = judge_mode
        self.judge_fn = judge_fn
        self.requests: list[tuple[ChatRequest, Optional[str]]] = []

    # -- helpers

    def _base_answer(self, query: str) -> str:
        if self.world is not None:
            return self.world.base_answer(query)
        head = " ".join(query.split()[:10])
        return f"Here is a direct answer to the request: {head}. The essentials are covered in a plain, neutral style."

    def _coverage_score(self, terms: Sequence[str], response: str) -> int:
        if not terms:
            return 5
        low = response.lower()
        frac = sum(1 for t in terms if t.lower() in low) / len(terms)
        return 1 + round(9 * frac)

    # -- task handlers

    def _handle_distill(self, prompt: str) -> str:
        trajectory = _between(prompt, "Feedback conversation:")
        rules = extract_directives(trajectory)
        return _numbered(rules) if rules else "NONE"

    def _handle_predict(self, prompt: str) -> str:
        query = _between(prompt, "Query:")
        if self.world is None:
            return "NONE"
        rules = self.world.prior_rules(query)
        return _numbered(rules) if rules else "NONE"

    def _handle_revise_rules(self, prompt: str) -> str:
        original = _between(prompt, "Original answer:", "Editing rules:")
        rules_text = _between(prompt, "Editing rules:")
        terms = quoted_terms(rules_text)
        extra = _keyword_sentences(terms) if terms else "The guidance has been applied throughout."
        return f"{original} {extra}"

    def _handle_revise_log(self, prompt: str) -> str:
        original = _between(prompt, "Original answer:", "Feedback conversation:")
        trajectory = _between(prompt, "Feedback conversation:")
        terms = quoted_terms(" ".join(extract_directives(trajectory)))
        extra = _keyword_sentences(terms) if terms else "The feedback has been worked into the text."
        return f"{original} {extra}"

    def _handle_judge(self, prompt: str) -> str:
        query = _between(prompt, "Query:", "Editing rules:")
        rules_text = _between(prompt, "Editing rules:", "Answer to grade:")
        response = _between(prompt, "Answer to grade:")
        sample = int(_between(prompt, "(sample ", " of") or "1")
        if self.judge_fn is not None:
            score = int(self.judge_fn(query, rules_text, response, sample))
        elif self.judge_mode == "honest_noise" and self.world is not None:
            # On all-noise logs no feedback is real, so the base answer is
            # the gold standard: any deviation from it scores lower.  This
            # guarantees the base policy scores >= every checkpoint.
            score = 8 if response.strip() == self.world.base_answer(query).strip() else 3
        else:
            score = self._coverage_score(quoted_terms(rules_text), response)
        score = min(10, max(1, score))
        fmt = _JUDGE_FORMATS[_hash_int(str(self.seed), "judgefmt", prompt) % len(_JUDGE_FORMATS)]
        return fmt.format(s=score)

    def _handle_critique(self, prompt: str, adapter: Optional[str]) -> str:
        if adapter is None:
            # Base policy can critique too, but has nothing specific to say.
            return "NONE"
        blob = self.hub.get(adapter)
        rules = tuple(f"Always mention the term '{k}'." for k in blob.keywords)
        return _numbered(rules) if rules else "NONE"

    def _handle_revise_critique(self, prompt: str) -> str:
        draft = _between(prompt, "Draft answer:", "Critique:")
        critique = _between(prompt, "Critique:")
        terms = quoted_terms(critique)
        extra = _keyword_sentences(terms) if terms else "The critique has been applied."
        return f"{draft} {extra}"

    def _handle_plain(self, prompt: str, adapter: Optional[str]) -> str:
        base = self._base_answer(prompt)
        if adapter is None:
            return base
        blob = self.hub.get(adapter)
        if blob.kind != "expert":
            # A critic asked to answer directly just critiques its own draft.
            return _numbered(tuple(f"Always mention the term '{k}'." for k in blob.keywords))
        return f"{base} {_keyword_sentences(blob.keywords)}" if blob.keywords else base

    def chat(self, request: ChatRequest, adapter: Optional[str] = None) -> str:
        self.requests.append((request, adapter))
        if adapter is not None:
            self.hub.get(adapter)  # unknown refs fail loudly
        prompt = request.last_user_content()
        marker = task_marker(prompt)
        if marker == "distill-rules":
            return self._handle_distill(prompt)
        if marker == "predict-rules":
            return self._handle_predict(prompt)
        if marker == "revise-with-rules":
            return self._handle_revise_rules(prompt)
        if marker == "revise-with-log":
            return self._handle_revise_log(prompt)
        if marker == "judge-response":
            return self._handle_judge(prompt)
        if marker == "critique":
            return self._handle_critique(prompt, adapter)
        if marker == "revise-with-critique":
            return self._handle_revise_critique(prompt)
        return self._handle_plain(prompt, adapter)


class EchoChat:
    """Echoes the last user message; trivially deterministic."""

    def chat(self, request: ChatRequest, adapter: Optional[str] = None) -> str:
        return request.last_user_content()


class ScriptedChat:
    """First script key found in the prompt selects the canned response."""

    def __init__(self, script: Sequence[tuple[str, str]], default: Optional[str] = None):
        self.script = list(script)
        self.default = default
        self.requests: list[tuple[ChatRequest, Optional[str]]] = []

    def chat(self, request: ChatRequest, adapter: Optional[str] = None) -> str:
        self.requests.append((request, adapter))
        prompt = request.last_user_content()
        for key, response in self.script:
            if key in prompt:
                return response
        if self.default is not None:
            return self.default
        raise ProtocolError(f"no scripted response matches prompt: {prompt[:80]!r}")


# ---------------------------------------------------------------------------
# Trainer


def _ranked_keywords(weighted: dict[str, int]) -> Tuple[str, ...]:
    return tuple(sorted(weighted, key=lambda k: (-weighted[k], k)))


class MockTrainerBackend:
    """Instant in-process trainer.

    Expert jobs learn the quoted terms appearing in the pair rule sets,
    majority first, a growing fraction per epoch; critic jobs learn the
    quoted terms of their targets the same way.  NLL jobs report a
    deterministic decreasing validation loss per epoch, overridable via
    ``loss_schedule(cluster_id, epoch) -> float``.
    """

    def __init__(
        self,
        hub: MockModelHub,
        seed: int = 0,
        loss_schedule: Optional[Callable[[int, int], float]] = None,
        fail: Optional[Callable[[TrainJobSpec], Optional[str]]] = None,
    ):
        self.hub = hub
        self.seed = seed
        self.loss_schedule = loss_schedule
        self.fail = fail
        self._jobs: dict[str, JobStatus] = {}

    def _job_id(self, spec: TrainJobSpec) -> str:
        return hashlib.sha256(
            (str(self.seed) + "\x1f" + repr(spec.to_dict())).encode("utf-8")
        ).hexdigest()[:16]

    def _default_loss(self, job_id: str, epoch: int, epochs: int) -> float:
        jitter = (_hash_int(str(self.seed), "loss", job_id, str(epoch)) % 1000) / 1000.0
        return round(0.2 + 2.3 * math.exp(-0.4 * epoch) + 0.05 * jitter, 6)

    def _learned(self, spec: TrainJobSpec) -> dict[str, int]:
        weighted: dict[str, int] = {}
        if spec.objective is TrainObjective.DPO_PLUS_NLL:
            sources = [" ".join(p.rules) for p in spec.pairs]
        else:
            sources = [r.target for r in spec.records]
        for text in sources:
            for term in quoted_terms(text):
                weighted[term] = weighted.get(term, 0) + 1
        return weighted

    def submit(self, spec: TrainJobSpec) -> str:
        spec.validate()
        job_id = self._job_id(spec)
        failure = self.fail(spec) if self.fail is not None else None
        if failure:
            self._jobs[job_id] = JobStatus(job_id=job_id, state=JobState.FAILED, message=failure)
            return job_id

        ranked = _ranked_keywords(self._learned(spec))
        if spec.init_from is not None:
            prior = self.hub.get(spec.init_from)
            ranked = tuple(dict.fromkeys(prior.keywords + ranked))
        kind = "expert" if spec.objective is TrainObjective.DPO_PLUS_NLL else "critic"
        epochs = spec.hyperparams.epochs
        checkpoints = []
        for epoch in range(1, epochs + 1):
            n_learned = math.ceil(len(ranked) * epoch / epochs)
            blob = AdapterBlob(
                kind=kind,
                keywords=ranked[:n_learned],
                cluster_id=spec.cluster_id,
                epoch=epoch,
            )
            ref = f"mock://{kind}/c{spec.cluster_id}/{job_id}/e{epoch}"
            self.hub.register(ref, blob)
            val_loss = None
            metrics: dict[str, float] = {"learned_terms": float(n_learned)}
            if spec.objective is TrainObjective.NLL:
                if self.loss_schedule is not None:
                    val_loss = float(self.loss_schedule(spec.cluster_id, epoch))
                else:
                    val_loss = self._default_loss(job_id, epoch, epochs)
            checkpoints.append(
                CheckpointInfo(
                    job_id=job_id,
                    epoch=epoch,
                    backend_ref=ref,
                    validation_loss=val_loss,
                    metrics=metrics,
                )
            )
        self._jobs[job_id] = JobStatus(job_id=job_id, state=JobState.DONE, checkpoints=tuple(checkpoints))
        return job_id

    def poll(self, job_id: str) -> JobStatus:
        if job_id not in self._jobs:
            raise ProtocolError(f"unknown job id: {job_id}")
        return self._jobs[job_id]


@dataclass
class MockBackendSet:
    """The full in-process backend family sharing one adapter hub."""

    chat: MockChatBackend
    embed: HashingEmbedder
    rerank: OverlapReranker
    trainer: MockTrainerBackend
    hub: MockModelHub = field(repr=False, default=None)  # type: ignore[assignment]


def build_mock_backends(
    seed: int = 0,
    embed_dim: int = 64,
    world: Optional[MockWorld] = None,
    judge_mode: str = "rules",
    judge_fn: Optional[Callable[[str, str, str, int], int]] = None,
    loss_schedule: Optional[Callable[[int, int], float]] = None,
    fail: Optional[Callable[[TrainJobSpec], Optional[str]]] = None,
    hub_path: Optional[str] = None,
) -> MockBackendSet:
    hub = MockModelHub(path=hub_path)
    chat = MockChatBackend(hub=hub, world=world, seed=seed, judge_mode=judge_mode, judge_fn=judge_fn)
    trainer = MockTrainerBackend(hub=hub, seed=seed, loss_schedule=loss_schedule, fail=fail)
    return MockBackendSet(
        chat=chat,
        embed=HashingEmbedder(dim=embed_dim, seed=seed),
        rerank=OverlapReranker(),
        trainer=trainer,
        hub=hub,
    )
