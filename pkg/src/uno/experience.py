"""Per-cluster adaptive optimization.

Low-gap clusters get an expert adapter trained on preference pairs and
must survive the simulated performance verifier (per-epoch LLM-as-judge
win rate against the base policy, reward-hacking filters applied first).
Everything else gets a critic adapter trained to emit pseudo feedback, or
falls back to the base policy when too small or when training fails.
"""

from __future__ import annotations

import logging
import math
import re
import time
import unicodedata
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

from .backends.base import (
    ChatBackend,
    ChatRequest,
    CheckpointInfo,
    JobState,
    PairRecord,
    SeqRecord,
    TrainHyperparams,
    TrainJobSpec,
    TrainObjective,
    TrainerBackend,
)
from .config import EngineConfig
from .prompts import render
from .types import (
    AdapterHandle,
    AdapterKind,
    ClusterStatus,
    GapClass,
    PreferencePair,
    VerifierReport,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# BLEU-4


def _tokenize(text: str) -> list[str]:
    return unicodedata.normalize("NFC", text).split()


def bleu4(candidate: str, reference: str) -> float:
    """Single-reference BLEU: uniform n-gram precisions for n=1..4 with the
    standard brevity penalty; whitespace tokens after NFC normalization.
    Any empty precision (including candidates shorter than 4 tokens)
    yields 0."""
    cand = _tokenize(candidate)
    ref = _tokenize(reference)
    c, r = len(cand), len(ref)
    if c == 0:
        return 0.0
    log_sum = 0.0
    logs = []
    for n in range(1, 5):
        cand_grams = Counter(tuple(cand[i : i + n]) for i in range(c - n + 1))
        total = sum(cand_grams.values())
        if total == 0:
            return 0.0
        ref_grams = Counter(tuple(ref[i : i + n]) for i in range(r - n + 1))
        clipped = sum(min(k, ref_grams[g]) for g, k in cand_grams.items())
        if clipped == 0:
            return 0.0
        logs.append(0.25 * math.log(clipped / total))
    log_sum = math.fsum(logs)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# Reward-hacking filters

DEFAULT_SPECIAL_TOKENS = (
    "<|im_start|>",
    "<|im_end|>",
    "<|endoftext|>",
    "<|assistant|>",
    "<|user|>",
    "<s>",
    "</s>",
    "<pad>",
    "<bos>",
    "<eos>",
    "[INST]",
    "[/INST]",
)


class FilterReason(str, Enum):
    EMPTY_AFTER_STRIP = "empty_after_strip"
    BLEU_BELOW_FLOOR = "bleu_below_floor"


def hack_filter(
    response: str,
    original: str,
    bleu_floor: float,
    special_tokens: Sequence[str] = DEFAULT_SPECIAL_TOKENS,
) -> Optional[FilterReason]:
    """Reject degenerate responses before judging.

    Empty after stripping newlines and chat sentinel tokens, or drifted so
    far from the original response that BLEU-4 drops below the floor.
    """
    stripped = response.replace("\n", "").replace("\r", "")
    for token in special_tokens:
        stripped = stripped.replace(token, "")
    if not stripped.strip():
        return FilterReason.EMPTY_AFTER_STRIP
    if bleu4(response, original) < bleu_floor:
        return FilterReason.BLEU_BELOW_FLOOR
    return None


# ---------------------------------------------------------------------------
# LLM-as-judge

_SCORE_PATTERNS = (
    re.compile(r"score[^0-9\n]{0,16}(10|[1-9])\b", re.IGNORECASE),
    re.compile(r"\b(10|[1-9])\s*(?:/|out of)\s*10\b", re.IGNORECASE),
    re.compile(r"\[\[\s*(10|[1-9])\s*\]\]"),
    re.compile(r"(?:rating|rate(?:d)? this|grade)[^0-9\n]{0,16}(10|[1-9])\b", re.IGNORECASE),
    re.compile(r"(?<![\d.])(10|[1-9])(?!\d|\.\d|%)"),
)


def parse_judge_score(text: str) -> Optional[int]:
    """Pull an integer 1..10 out of free-form judge prose; None if the
    output carries no usable score."""
    for pattern in _SCORE_PATTERNS:
        m = pattern.search(text)
        if m:
            return int(m.group(1))
    return None


def judge_response(
    query: str,
    rules_text: str,
    response: str,
    chat: ChatBackend,
    samples: int,
    temperature: float,
) -> float:
    """Mean of `samples` judge scores for one response; unparseable samples
    are discarded, and a fully unparseable judge scores the response 0."""
    if samples < 1:
        raise ValueError("judge needs at least one sample")
    scores = []
    for k in range(1, samples + 1):
        prompt = render(
            "judge",
            query=query,
            rules=rules_text,
            response=response,
            sample_index=k,
            sample_total=samples,
        )
        answer = chat.chat(ChatRequest.user(prompt, temperature=temperature))
        score = parse_judge_score(answer)
        if score is None:
            logger.warning("judge sample %d unparseable: %r", k, answer[:80])
            continue
        scores.append(score)
    if not scores:
        logger.warning("all %d judge samples unparseable; scoring 0", samples)
        return 0.0
    return sum(scores) / len(scores)


def judge_pairwise(
    query: str,
    rules_text: str,
    response_a: str,
    response_b: str,
    chat: ChatBackend,
    samples: int,
    temperature: float = 0.1,
    filtered_a: Optional[FilterReason] = None,
    filtered_b: Optional[FilterReason] = None,
) -> tuple[float, float]:
    """Score two responses independently with the rules as context.
    Filtered responses score 0 without any judge call."""
    score_a = 0.0 if filtered_a else judge_response(query, rules_text, response_a, chat, samples, temperature)
    score_b = 0.0 if filtered_b else judge_response(query, rules_text, response_b, chat, samples, temperature)
    return score_a, score_b


@dataclass(frozen=True)
class JudgeVerdict:
    item_id: str
    checkpoint_score: float
    base_score: float
    winner: str  # checkpoint | base | tie
    filtered_checkpoint: Optional[FilterReason] = None
    filtered_base: Optional[FilterReason] = None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "checkpoint_score": self.checkpoint_score,
            "base_score": self.base_score,
            "winner": self.winner,
            "filtered_checkpoint": self.filtered_checkpoint.value if self.filtered_checkpoint else None,
            "filtered_base": self.filtered_base.value if self.filtered_base else None,
        }


# ---------------------------------------------------------------------------
# Training plumbing


class TrainerFailure(Exception):
    """Terminal trainer-side failure for one job."""


def poll_until_done(trainer: TrainerBackend, job_id: str, interval: float = 0.2, timeout: float = 600.0):
    deadline = time.monotonic() + timeout
    while True:
        status = trainer.poll(job_id)
        if status.state is JobState.DONE:
            return status
        if status.state is JobState.FAILED:
            raise TrainerFailure(status.message or f"job {job_id} failed")
        if time.monotonic() > deadline:
            raise TrainerFailure(f"job {job_id} timed out after {timeout}s")
        time.sleep(interval)


def _hyperparams(config: EngineConfig) -> TrainHyperparams:
    return TrainHyperparams(
        adapter_rank=config.adapter_rank,
        adapter_dropout=config.adapter_dropout,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        dpo_beta=config.dpo_beta,
        nll_weight=config.nll_weight,
        seed=config.seed,
    )


def _wire_pairs(pairs: Sequence[PreferencePair]) -> Tuple[PairRecord, ...]:
    return tuple(
        PairRecord(
            session_id=p.session_id,
            query=p.query,
            chosen=p.chosen,
            rejected=p.rejected,
            rules=p.rules.rules,
        )
        for p in pairs
    )


def rules_as_target(rules: Sequence[str]) -> str:
    return "\n".join(f"{i}. {r}" for i, r in enumerate(rules, start=1))


# ---------------------------------------------------------------------------
# Primary experience construction


@dataclass(frozen=True)
class PrimaryOutcome:
    accepted: bool
    adapter: Optional[AdapterHandle]
    report: Optional[VerifierReport]
    verdicts: Tuple[Tuple[JudgeVerdict, ...], ...]  # per epoch
    reason: str = ""


def _verify_checkpoint(
    checkpoint: CheckpointInfo,
    validation: Sequence[PreferencePair],
    chat: ChatBackend,
    config: EngineConfig,
) -> tuple[float, Tuple[JudgeVerdict, ...]]:
    wins = 0.0
    verdicts = []
    for pair in validation:
        request = ChatRequest.user(pair.query, temperature=config.temperature)
        resp_ckpt = chat.chat(request, adapter=checkpoint.backend_ref)
        resp_base = chat.chat(request)
        filt_ckpt = hack_filter(resp_ckpt, pair.rejected, config.bleu_floor)
        filt_base = hack_filter(resp_base, pair.rejected, config.bleu_floor)
        score_ckpt, score_base = judge_pairwise(
            pair.query,
            pair.rules.joined(),
            resp_ckpt,
            resp_base,
            chat,
            samples=config.judge_samples,
            temperature=config.temperature,
            filtered_a=filt_ckpt,
            filtered_b=filt_base,
        )
        if score_ckpt > score_base:
            winner = "checkpoint"
            wins += 1.0
        elif score_ckpt < score_base:
            winner = "base"
        else:
            winner = "tie"
            wins += 0.5
        verdicts.append(
            JudgeVerdict(
                item_id=pair.session_id,
                checkpoint_score=score_ckpt,
                base_score=score_base,
                winner=winner,
                filtered_checkpoint=filt_ckpt,
                filtered_base=filt_base,
            )
        )
    return wins / len(validation), tuple(verdicts)


def build_primary(
    cluster_id: int,
    train: Sequence[PreferencePair],
    validation: Sequence[PreferencePair],
    trainer: TrainerBackend,
    chat: ChatBackend,
    config: EngineConfig,
    init_from: Optional[str] = None,
) -> PrimaryOutcome:
    """Train an expert adapter and keep the best checkpoint only when its
    verifier win rate strictly exceeds gamma."""
    if not validation:
        return PrimaryOutcome(False, None, None, (), reason="validation split empty")
    spec = TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL,
        cluster_id=cluster_id,
        hyperparams=_hyperparams(config),
        pairs=_wire_pairs(train),
        init_from=init_from,
    )
    try:
        status = poll_until_done(trainer, trainer.submit(spec))
    except TrainerFailure as exc:
        return PrimaryOutcome(False, None, None, (), reason=f"trainer failure: {exc}")

    checkpoints = sorted(status.checkpoints, key=lambda c: c.epoch)
    win_rates = []
    all_verdicts = []
    for ckpt in checkpoints:
        rate, verdicts = _verify_checkpoint(ckpt, validation, chat, config)
        win_rates.append(rate)
        all_verdicts.append(verdicts)

    best_idx = max(range(len(win_rates)), key=lambda i: (win_rates[i], -i))
    best = checkpoints[best_idx]
    win_rate_best = win_rates[best_idx]
    accepted = win_rate_best > config.gamma
    report = VerifierReport(
        cluster_id=cluster_id,
        per_epoch_win_rates=tuple(win_rates),
        best_epoch=best.epoch,
        win_rate_best=win_rate_best,
        accepted=accepted,
    )
    adapter = None
    if accepted:
        adapter = AdapterHandle(
            kind=AdapterKind.EXPERT,
            backend_ref=best.backend_ref,
            epoch=best.epoch,
            metrics={"win_rate": win_rate_best},
        )
    reason = "" if accepted else f"win rate {win_rate_best:.4f} not above {config.gamma}"
    return PrimaryOutcome(accepted, adapter, report, tuple(all_verdicts), reason=reason)


# ---------------------------------------------------------------------------
# Reflective experience construction


def build_reflective(
    cluster_id: int,
    train_records: Sequence[SeqRecord],
    validation_records: Sequence[SeqRecord],
    trainer: TrainerBackend,
    config: EngineConfig,
) -> AdapterHandle:
    """Train a critic adapter on (query, response) -> rules and keep the
    checkpoint with the lowest validation loss (earliest on ties)."""
    spec = TrainJobSpec(
        objective=TrainObjective.NLL,
        cluster_id=cluster_id,
        hyperparams=_hyperparams(config),
        records=tuple(train_records),
        validation_records=tuple(validation_records),
    )
    status = poll_until_done(trainer, trainer.submit(spec))
    checkpoints = sorted(status.checkpoints, key=lambda c: c.epoch)
    losses = [c.validation_loss if c.validation_loss is not None else math.inf for c in checkpoints]
    best_idx = min(range(len(losses)), key=lambda i: (losses[i], i))
    best = checkpoints[best_idx]
    return AdapterHandle(
        kind=AdapterKind.CRITIC,
        backend_ref=best.backend_ref,
        epoch=best.epoch,
        metrics={"validation_loss": float(losses[best_idx])},
    )


# ---------------------------------------------------------------------------
# Per-cluster state machine


@dataclass(frozen=True)
class ClusterBuildResult:
    cluster_id: int
    status: ClusterStatus
    adapter: Optional[AdapterHandle]
    verifier: Optional[VerifierReport]
    verdicts: Tuple[Tuple[JudgeVerdict, ...], ...]
    reason: str


def optimize_cluster(
    cluster_id: int,
    classification: GapClass,
    train_pairs: Sequence[PreferencePair],
    validation_pairs: Sequence[PreferencePair],
    critic_train: Sequence[SeqRecord],
    critic_validation: Sequence[SeqRecord],
    member_count: int,
    trainer: TrainerBackend,
    chat: ChatBackend,
    config: EngineConfig,
) -> ClusterBuildResult:
    """Run the full per-cluster decision: primary attempt for low-gap
    clusters with enough training data, reflective otherwise, fallback
    when even the critic is infeasible.  Every cluster ends in exactly one
    terminal status."""
    verifier = None
    verdicts: Tuple[Tuple[JudgeVerdict, ...], ...] = ()
    reasons = []

    if classification is GapClass.LOW:
        if len(train_pairs) >= config.min_cluster_train:
            outcome = build_primary(cluster_id, train_pairs, validation_pairs, trainer, chat, config)
            verifier = outcome.report
            verdicts = outcome.verdicts
            if outcome.accepted:
                return ClusterBuildResult(
                    cluster_id, ClusterStatus.PRIMARY, outcome.adapter, verifier, verdicts, ""
                )
            reasons.append(outcome.reason)
        else:
            reasons.append(
                f"train split {len(train_pairs)} below min_cluster_train {config.min_cluster_train}"
            )
    else:
        reasons.append("high-gap cluster")

    if member_count >= config.min_cluster_critic:
        try:
            adapter = build_reflective(cluster_id, critic_train, critic_validation, trainer, config)
        except TrainerFailure as exc:
            reasons.append(f"critic trainer failure: {exc}")
            return ClusterBuildResult(
                cluster_id, ClusterStatus.FALLBACK, None, verifier, verdicts, "; ".join(reasons)
            )
        return ClusterBuildResult(
            cluster_id, ClusterStatus.REFLECTIVE, adapter, verifier, verdicts, "; ".join(reasons)
        )

    reasons.append(f"members {member_count} below min_cluster_critic {config.min_cluster_critic}")
    return ClusterBuildResult(
        cluster_id, ClusterStatus.FALLBACK, None, verifier, verdicts, "; ".join(reasons)
    )
