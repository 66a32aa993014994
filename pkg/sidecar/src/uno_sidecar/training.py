"""Adapter training loops: preference optimization with an auxiliary
likelihood term, and plain likelihood training for critics.

Reference log-probabilities come from the frozen base model and are
computed once per job; every epoch snapshots the adapter tensors as a
checkpoint and reports the implicit chosen reward
beta * (logp_adapter(chosen) - logp_base(chosen)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .model import TinyCharLM, encode

logger = logging.getLogger(__name__)

MAX_PROMPT_CHARS = 140
MAX_TARGET_CHARS = 140


@dataclass(frozen=True)
class PairExample:
    query: str
    chosen: str
    rejected: str


@dataclass(frozen=True)
class SeqExample:
    prompt: str
    target: str


@dataclass
class TrainedCheckpoint:
    epoch: int
    adapter_state: list[dict]
    validation_loss: Optional[float] = None
    metrics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Hyperparams:
    adapter_rank: int = 64
    adapter_dropout: float = 0.05
    learning_rate: float = 5e-4
    epochs: int = 8
    dpo_beta: float = 0.1
    nll_weight: float = 0.5
    seed: int = 0


def _pair_prompt(query: str) -> str:
    return f"Q: {query[-MAX_PROMPT_CHARS:]}\nA:"


def _clip_target(text: str) -> str:
    return " " + text[:MAX_TARGET_CHARS]


def critic_prompt(query: str, response: str) -> str:
    return f"Q: {query[-MAX_PROMPT_CHARS:]}\nDraft: {response[:MAX_PROMPT_CHARS]}\nRules:"


def _target_logprob(model: TinyCharLM, prompt: str, target: str) -> torch.Tensor:
    return model.sequence_logprob(encode(prompt), encode(target))


def train_dpo_nll(
    model: TinyCharLM,
    pairs: Sequence[PairExample],
    hp: Hyperparams,
    job_seed: int,
    init_state: Optional[list[dict]] = None,
) -> list[TrainedCheckpoint]:
    """Per-pair objective:
    -log sigmoid(beta * (chosen margin - rejected margin)) weighted
    (1 - nll_weight), plus nll_weight times the per-char likelihood loss
    on the chosen response.  With the documented defaults the two terms
    carry equal 0.5 weights."""
    torch.manual_seed(job_seed)
    prompts = [_pair_prompt(p.query) for p in pairs]
    chosen = [_clip_target(p.chosen) for p in pairs]
    rejected = [_clip_target(p.rejected) for p in pairs]

    model.detach_adapter()
    with torch.no_grad():
        ref_chosen = torch.tensor([_target_logprob(model, p, c) for p, c in zip(prompts, chosen)])
        ref_rejected = torch.tensor(
            [_target_logprob(model, p, r) for p, r in zip(prompts, rejected)]
        )

    rank = model.attach_adapter(hp.adapter_rank, hp.adapter_dropout, seed=job_seed)
    if init_state is not None:
        model.load_adapter_state(init_state)
    optimizer = torch.optim.AdamW(model.adapter_parameters(), lr=hp.learning_rate)
    rng = torch.Generator().manual_seed(job_seed + 1)

    checkpoints = []
    for epoch in range(1, hp.epochs + 1):
        model.train()
        order = torch.randperm(len(pairs), generator=rng).tolist()
        epoch_loss = 0.0
        for i in order:
            lp_chosen = _target_logprob(model, prompts[i], chosen[i])
            lp_rejected = _target_logprob(model, prompts[i], rejected[i])
            margin = (lp_chosen - ref_chosen[i]) - (lp_rejected - ref_rejected[i])
            pref_loss = -F.logsigmoid(hp.dpo_beta * margin)
            nll_loss = -lp_chosen / max(len(chosen[i]), 1)
            loss = (1.0 - hp.nll_weight) * pref_loss + hp.nll_weight * nll_loss
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())

        model.eval()
        with torch.no_grad():
            rewards = [
                hp.dpo_beta * (float(_target_logprob(model, prompts[i], chosen[i])) - float(ref_chosen[i]))
                for i in range(len(pairs))
            ]
        checkpoints.append(
            TrainedCheckpoint(
                epoch=epoch,
                adapter_state=model.adapter_state(),
                metrics={
                    "dpo_chosen_reward": sum(rewards) / len(rewards),
                    "train_loss": epoch_loss / len(pairs),
                    "adapter_rank_effective": float(rank),
                },
            )
        )
        logger.info(
            "dpo epoch %d: loss %.4f, chosen reward %.4f",
            epoch,
            epoch_loss / len(pairs),
            checkpoints[-1].metrics["dpo_chosen_reward"],
        )
    model.detach_adapter()
    return checkpoints


def train_nll(
    model: TinyCharLM,
    records: Sequence[SeqExample],
    validation: Sequence[SeqExample],
    hp: Hyperparams,
    job_seed: int,
) -> list[TrainedCheckpoint]:
    """Likelihood training on (prompt, target) records; every epoch
    reports the per-char validation loss (falling back to the training
    records when no validation split was provided)."""
    torch.manual_seed(job_seed)
    val = validation if validation else records
    rank = model.attach_adapter(hp.adapter_rank, hp.adapter_dropout, seed=job_seed)
    optimizer = torch.optim.AdamW(model.adapter_parameters(), lr=hp.learning_rate)
    rng = torch.Generator().manual_seed(job_seed + 1)

    checkpoints = []
    for epoch in range(1, hp.epochs + 1):
        model.train()
        order = torch.randperm(len(records), generator=rng).tolist()
        epoch_loss = 0.0
        for i in order:
            target = _clip_target(records[i].target)
            loss = -_target_logprob(model, records[i].prompt, target) / max(len(target), 1)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())

        model.eval()
        with torch.no_grad():
            val_losses = [
                float(-_target_logprob(model, r.prompt, _clip_target(r.target)))
                / max(len(_clip_target(r.target)), 1)
                for r in val
            ]
        val_loss = sum(val_losses) / len(val_losses)
        checkpoints.append(
            TrainedCheckpoint(
                epoch=epoch,
                adapter_state=model.adapter_state(),
                validation_loss=val_loss,
                metrics={
                    "train_loss": epoch_loss / len(records),
                    "adapter_rank_effective": float(rank),
                },
            )
        )
        logger.info("nll epoch %d: train %.4f, val %.4f", epoch, epoch_loss / len(records), val_loss)
    model.detach_adapter()
    return checkpoints
