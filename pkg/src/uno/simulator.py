"""Synthetic user-log generation with a hidden answer key.

Each topic owns a distinct query vocabulary and a set of hidden target
rules ("always mention the term 'X'").  A session is high-quality with
probability alpha, in which case its feedback trajectory teaches the
topic's rules; otherwise it is noise in one of three styles.  The oracle
metric is keyword presence against the hidden key, so end-to-end tests
have a ground truth that no chat mock can influence.

The SimWorld doubles as the knowledge base of the teachable mock backend
family: the mock's "prior" rules per topic cover the same keywords, which
keeps genuine-feedback clusters in the low-gap regime.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from .types import Session, Turn

logger = logging.getLogger(__name__)

NOISE_STYLES = ("random_rules", "contradictory_rules", "empty_chatter")

_SUBJECTS = (
    "harbor", "glacier", "orchard", "foundry", "observatory", "archive",
    "reservoir", "vineyard", "terminal", "greenhouse", "quarry", "lighthouse",
    "monorail", "planetarium", "shipyard", "aqueduct",
)

_ASPECTS = ("logistics", "staffing", "maintenance", "expansion", "safety", "outreach")

_KEYWORDS = (
    "amberline", "bluequartz", "cedarwave", "dunecrest", "embergrove", "ferngate",
    "goldspire", "hazelbrook", "ironvale", "junipersong", "kelpshore", "lunargrain",
    "mapleforge", "nightharbor", "opalridge", "pinewhisper", "quillstone", "rosethorn",
    "silverreed", "thistledown", "umbermoss", "violetpeak", "willowmere", "zephyrfield",
)

_NOISE_KEYWORDS = (
    "gravelmist", "tinselfog", "rustpuddle", "soggymatch", "crumbleway", "drizzlepatch",
    "mothdust", "pebblesash", "splinterveil", "muddleton", "frayknot", "smudgebank",
)

_CHATTER = (
    "haha that is funny",
    "ok thanks anyway",
    "hmm let me think about something else",
    "never mind, moving on",
    "lol good one",
    "brb, meeting starting",
)


@dataclass(frozen=True)
class SimSpec:
    n_sessions: int
    alpha: float
    n_topics: int = 4
    rules_per_topic: int = 2
    noise_style: str = "random_rules"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.n_topics < 1:
            raise ValueError("n_topics must be >= 1")
        if self.n_topics > len(_SUBJECTS):
            raise ValueError(f"at most {len(_SUBJECTS)} topics supported")
        if self.rules_per_topic < 1:
            raise ValueError("rules_per_topic must be >= 1")
        if self.n_topics * self.rules_per_topic > len(_KEYWORDS):
            raise ValueError("not enough keywords for this topic layout")
        if self.noise_style not in NOISE_STYLES:
            raise ValueError(f"noise_style must be one of {NOISE_STYLES}")

    def to_dict(self) -> dict:
        return {
            "n_sessions": self.n_sessions,
            "alpha": self.alpha,
            "n_topics": self.n_topics,
            "rules_per_topic": self.rules_per_topic,
            "noise_style": self.noise_style,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "SimSpec":
        return cls(**dict(d))


@dataclass(frozen=True)
class Topic:
    index: int
    subject: str
    keywords: Tuple[str, ...]

    def hidden_rules(self) -> Tuple[str, ...]:
        return tuple(f"Always mention the term '{k}'." for k in self.keywords)

    def prior_rules(self) -> Tuple[str, ...]:
        return tuple(f"Always mention the term '{k}' when responding." for k in self.keywords)


class SimWorld:
    """Everything the synthetic domain knows; implements the mock
    backend family's world protocol."""

    def __init__(self, spec: SimSpec):
        self.spec = spec
        self.topics = tuple(
            Topic(
                index=t,
                subject=_SUBJECTS[t],
                keywords=tuple(
                    _KEYWORDS[t * spec.rules_per_topic + j] for j in range(spec.rules_per_topic)
                ),
            )
            for t in range(spec.n_topics)
        )
        self._by_subject = {topic.subject: topic for topic in self.topics}

    def topic_of(self, text: str) -> Optional[Topic]:
        for token in text.lower().split():
            token = token.strip(".,:;!?")
            if token in self._by_subject:
                return self._by_subject[token]
        return None

    def query_for(self, topic: Topic, variant: int) -> str:
        aspect = _ASPECTS[variant % len(_ASPECTS)]
        return (
            f"{topic.subject} briefing {variant}: outline the {topic.subject} {aspect} "
            f"plan for the {topic.subject} crew"
        )

    # -- world protocol used by the mock backends

    def base_answer(self, query: str) -> str:
        topic = self.topic_of(query)
        subject = topic.subject if topic else "requested"
        return (
            f"Here is the {subject} briefing. It reviews the current status, "
            f"summarizes open items, and outlines the next steps for the team."
        )

    def prior_rules(self, query: str) -> Tuple[str, ...]:
        topic = self.topic_of(query)
        return topic.prior_rules() if topic else ()

    def hidden_keywords(self, query: str) -> Tuple[str, ...]:
        topic = self.topic_of(query)
        return topic.keywords if topic else ()


@dataclass(frozen=True)
class SimCorpus:
    sessions: Tuple[Session, ...]
    labels: Mapping[str, str]  # session id -> "H" | "N"
    keywords: Mapping[str, Tuple[str, ...]]  # session id -> taught/noise keywords
    world: SimWorld


def _quality_trajectory(topic: Topic) -> Tuple[Turn, ...]:
    turns = []
    for kw in topic.keywords:
        turns.append(
            Turn(
                user_input=f"Thanks, but please always mention the term '{kw}'.",
                model_response="Understood, I will work that in.",
            )
        )
    return tuple(turns)


def _noise_trajectory(style: str, topic: Topic, rng: np.random.Generator) -> tuple[Tuple[Turn, ...], Tuple[str, ...]]:
    if style == "empty_chatter":
        n = int(rng.integers(1, 4))
        turns = tuple(
            Turn(user_input=str(rng.choice(_CHATTER)), model_response="Noted.") for _ in range(n)
        )
        return turns, ()
    if style == "random_rules":
        n = int(rng.integers(1, 3))
        kws = tuple(str(k) for k in rng.choice(_NOISE_KEYWORDS, size=n, replace=False))
        turns = tuple(
            Turn(
                user_input=f"Actually please always mention the term '{kw}'.",
                model_response="Noted.",
            )
            for kw in kws
        )
        return turns, kws
    # contradictory_rules: negate the topic's own targets
    turns = tuple(
        Turn(
            user_input=f"On reflection please never mention the term '{kw}'.",
            model_response="Noted.",
        )
        for kw in topic.keywords
    )
    return turns, topic.keywords


def generate(spec: SimSpec) -> SimCorpus:
    """Deterministic corpus plus its hidden labels and keywords."""
    world = SimWorld(spec)
    rng = np.random.default_rng(spec.seed)
    sessions = []
    labels: dict[str, str] = {}
    keywords: dict[str, Tuple[str, ...]] = {}
    for i in range(spec.n_sessions):
        topic = world.topics[i % spec.n_topics]
        query = world.query_for(topic, variant=i)
        session_id = f"sim-{i:05d}"
        is_high = bool(rng.random() < spec.alpha)
        if is_high:
            trajectory = _quality_trajectory(topic)
            taught = topic.keywords
        else:
            trajectory, taught = _noise_trajectory(spec.noise_style, topic, rng)
        sessions.append(
            Session(
                id=session_id,
                query=query,
                initial_response=world.base_answer(query),
                trajectory=trajectory,
            )
        )
        labels[session_id] = "H" if is_high else "N"
        keywords[session_id] = taught
    return SimCorpus(sessions=tuple(sessions), labels=labels, keywords=keywords, world=world)


def eval_queries(world: SimWorld, n: int, seed: int = 0) -> tuple[list[tuple[str, str]], dict[str, Tuple[str, ...]]]:
    """Held-out queries from the same topics plus their oracle key."""
    queries = []
    key: dict[str, Tuple[str, ...]] = {}
    for i in range(n):
        topic = world.topics[i % len(world.topics)]
        query = world.query_for(topic, variant=100_000 + i * 7 + seed)
        qid = f"eval-{i:05d}"
        queries.append((qid, query))
        key[qid] = topic.keywords
    return queries, key


@dataclass(frozen=True)
class OracleScore:
    value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"oracle score must lie in [0,1], got {self.value}")


def oracle_eval(
    responses: Mapping[str, str], key: Mapping[str, Sequence[str]]
) -> tuple[OracleScore, dict[str, float]]:
    """Mean fraction of hidden target keywords present per response.
    Missing responses score 0 with a warning."""
    per_query: dict[str, float] = {}
    for qid, keywords in key.items():
        response = responses.get(qid)
        if response is None:
            logger.warning("no response for query %s; scoring 0", qid)
            per_query[qid] = 0.0
            continue
        if not keywords:
            per_query[qid] = 0.0
            continue
        low = response.lower()
        per_query[qid] = sum(1 for k in keywords if k.lower() in low) / len(keywords)
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return OracleScore(value=mean), per_query


# ---------------------------------------------------------------------------
# Answer-key file (sealed: written beside the log, never read by the
# engine's decision path; the mock backends are built from its world spec)


def write_log_and_key(corpus: SimCorpus, out_dir: Path | str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "sessions.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for session in corpus.sessions:
            fh.write(json.dumps(session.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    key_path = out / "answer_key.json"
    payload = {
        "spec": corpus.world.spec.to_dict(),
        "topics": [
            {"index": t.index, "subject": t.subject, "keywords": list(t.keywords)}
            for t in corpus.world.topics
        ],
        "session_labels": dict(sorted(corpus.labels.items())),
        "session_keywords": {k: list(v) for k, v in sorted(corpus.keywords.items())},
    }
    key_path.write_text(json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n")
    return log_path, key_path


def load_world(key_path: Path | str) -> SimWorld:
    data = json.loads(Path(key_path).read_text(encoding="utf-8"))
    return SimWorld(SimSpec.from_dict(data["spec"]))
