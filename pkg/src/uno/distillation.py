"""Stage 1: filter raw sessions, distill rule sets, build preference pairs.

Sessions with empty trajectories are dropped first; the chat backend then
distills the remaining feedback into rules, an empty rule set drops the
session as uninformative, and the survivors get a revised response that
beats the original, forming (query, chosen, rejected, rules) pairs.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from .backends.base import ChatBackend, ChatRequest
from .config import EngineConfig
from .experience import hack_filter, judge_pairwise
from .prompts import render
from .types import (
    DistillDecision,
    DistillationOutcome,
    PreferencePair,
    RuleSet,
    RuleSource,
    Session,
)

logger = logging.getLogger(__name__)

MAX_RULES_PER_SET = 12

_LIST_ITEM_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-•*]\s+)(.*\S)\s*$")
_NONE_RE = re.compile(r"^\s*none\s*$", re.IGNORECASE)


def parse_rule_list(answer: str) -> Tuple[Tuple[str, ...], bool]:
    """Parse a numbered or bulleted list into rules.

    Returns (rules, parse_warning): a NONE sentinel alone on a line or an
    answer without list items yields no rules; the warning flags the
    latter when the answer was non-empty prose.
    """
    lines = answer.splitlines()
    for line in lines:
        if _NONE_RE.match(line):
            return (), False
    rules = []
    for line in lines:
        m = _LIST_ITEM_RE.match(line)
        if m:
            rules.append(m.group(1).strip())
    if len(rules) > MAX_RULES_PER_SET:
        logger.warning("rule set truncated from %d to %d items", len(rules), MAX_RULES_PER_SET)
        rules = rules[:MAX_RULES_PER_SET]
    warning = not rules and bool(answer.strip())
    if warning:
        logger.warning("unparseable rule answer, treating as empty: %r", answer[:80])
    return tuple(rules), warning


def render_trajectory(session: Session) -> str:
    lines = []
    for turn in session.trajectory:
        lines.append(f"user: {turn.user_input}")
        if turn.model_response:
            lines.append(f"assistant: {turn.model_response}")
    return "\n".join(lines)


def filter_sessions(
    corpus: Sequence[Session],
) -> tuple[list[Session], list[DistillationOutcome]]:
    """Split the corpus into sessions with feedback and trajectory-empty
    drops; a total function, no errors."""
    retained = []
    dropped = []
    for session in corpus:
        if session.turn_count == 0:
            dropped.append(
                DistillationOutcome(
                    session_id=session.id, decision=DistillDecision.DROPPED_EMPTY_TRAJECTORY
                )
            )
        else:
            retained.append(session)
    return retained, dropped


def distill_rules(session: Session, chat: ChatBackend, config: EngineConfig) -> RuleSet:
    """Ask the backend to turn the feedback trajectory into rules."""
    if session.turn_count == 0:
        raise ValueError("cannot distill a session with an empty trajectory")
    prompt = render(
        "distill",
        query=session.query,
        initial_response=session.initial_response,
        trajectory=render_trajectory(session),
    )
    answer = chat.chat(ChatRequest.user(prompt, temperature=config.temperature))
    rules, _ = parse_rule_list(answer)
    return RuleSet(rules=rules, source=RuleSource.DISTILLED)


@dataclass(frozen=True)
class RevisionResult:
    chosen: Optional[str]
    candidate_source: str = ""  # "rules" | "log"
    drop_reason: str = ""


def revise_response(
    session: Session, rules: RuleSet, chat: ChatBackend, config: EngineConfig
) -> RevisionResult:
    """Generate two revision candidates (rules-conditioned and
    log-conditioned), filter reward hacking, judge, and keep the winner;
    ties go to the rules-conditioned candidate."""
    if not rules:
        raise ValueError("revision requires a non-empty rule set")
    rules_prompt = render(
        "revise_with_rules",
        query=session.query,
        initial_response=session.initial_response,
        rules=rules.joined(),
    )
    log_prompt = render(
        "revise_with_log",
        query=session.query,
        initial_response=session.initial_response,
        trajectory=render_trajectory(session),
    )
    cand_rules = chat.chat(ChatRequest.user(rules_prompt, temperature=config.temperature))
    cand_log = chat.chat(ChatRequest.user(log_prompt, temperature=config.temperature))

    filt_rules = hack_filter(cand_rules, session.initial_response, config.bleu_floor)
    filt_log = hack_filter(cand_log, session.initial_response, config.bleu_floor)
    if filt_rules and filt_log:
        return RevisionResult(
            chosen=None,
            drop_reason=f"both candidates filtered ({filt_rules.value}, {filt_log.value})",
        )
    if filt_rules or filt_log:
        if filt_rules:
            return RevisionResult(chosen=cand_log, candidate_source="log")
        return RevisionResult(chosen=cand_rules, candidate_source="rules")

    score_rules, score_log = judge_pairwise(
        session.query,
        rules.joined(),
        cand_rules,
        cand_log,
        chat,
        samples=config.judge_samples,
        temperature=config.temperature,
    )
    if score_log > score_rules:
        return RevisionResult(chosen=cand_log, candidate_source="log")
    return RevisionResult(chosen=cand_rules, candidate_source="rules")


def distill_corpus(
    corpus: Sequence[Session], chat: ChatBackend, config: EngineConfig
) -> list[DistillationOutcome]:
    """Run the full stage over a corpus; outcomes are ordered by session id
    and conserve the corpus exactly (every session appears once)."""
    retained, outcomes = filter_sessions(corpus)
    for session in retained:
        rules = distill_rules(session, chat, config)
        if not rules:
            outcomes.append(
                DistillationOutcome(
                    session_id=session.id, decision=DistillDecision.DROPPED_EMPTY_RULES
                )
            )
            continue
        revision = revise_response(session, rules, chat, config)
        if revision.chosen is None:
            outcomes.append(
                DistillationOutcome(
                    session_id=session.id,
                    decision=DistillDecision.DROPPED_REWARD_HACKING,
                    rules=rules,
                    detail=revision.drop_reason,
                )
            )
            continue
        if revision.chosen == session.initial_response:
            logger.warning("session %s: revised response equals original; pair discarded", session.id)
            outcomes.append(
                DistillationOutcome(
                    session_id=session.id,
                    decision=DistillDecision.DROPPED_DEGENERATE_PAIR,
                    rules=rules,
                    detail="chosen equals rejected",
                )
            )
            continue
        pair = PreferencePair(
            session_id=session.id,
            query=session.query,
            chosen=revision.chosen,
            rejected=session.initial_response,
            rules=rules,
        )
        outcomes.append(
            DistillationOutcome(
                session_id=session.id,
                decision=DistillDecision.KEPT,
                rules=rules,
                pair=pair,
                detail=revision.candidate_source,
            )
        )
    outcomes.sort(key=lambda o: o.session_id)
    return outcomes


def emitted_pairs(outcomes: Sequence[DistillationOutcome]) -> list[PreferencePair]:
    return [o.pair for o in outcomes if o.decision is DistillDecision.KEPT and o.pair is not None]
