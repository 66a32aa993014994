"""Shared protocol-conformance fixture suite.

The same fixtures run against the in-process mocks, the HTTP clients, and
any real trainer service, so every implementation of the wire protocol is
held to identical observable semantics.  This module is public API: a
trainer service ships conformance by passing ``run_trainer_conformance``.
"""

from __future__ import annotations

from typing import Callable, Optional, Protocol, Sequence

from .base import (
    ChatRequest,
    JobState,
    PairRecord,
    ProtocolError,
    SeqRecord,
    TrainHyperparams,
    TrainJobSpec,
    TrainObjective,
)


class TrainerOps(Protocol):
    """What the suite needs from a trainer implementation."""

    def submit(self, spec: TrainJobSpec) -> str:
        ...

    def poll(self, job_id: str) -> object:
        ...

    def generate(
        self, messages: Sequence[dict], adapter: Optional[str], temperature: float, max_tokens: int
    ) -> str:
        ...


def _sample_pairs(n: int = 4) -> tuple[PairRecord, ...]:
    return tuple(
        PairRecord(
            session_id=f"s{i:03d}",
            query=f"Draft note {i} covering the weekly plan.",
            chosen=f"Draft note {i} text. Be sure to address 'cadence'.",
            rejected=f"Draft note {i} text.",
            rules=("Always mention the term 'cadence'.",),
        )
        for i in range(n)
    )


def _sample_records(n: int = 4) -> tuple[SeqRecord, ...]:
    return tuple(
        SeqRecord(
            session_id=f"s{i:03d}",
            input_query=f"Draft note {i} covering the weekly plan.",
            input_response=f"Draft note {i} text.",
            target="1. Always mention the term 'cadence'.",
        )
        for i in range(n)
    )


def _hp(epochs: int) -> TrainHyperparams:
    return TrainHyperparams(epochs=epochs, seed=13)


def _wait_done(ops: TrainerOps, job_id: str, attempts: int = 600) -> object:
    status = ops.poll(job_id)
    for _ in range(attempts):
        if status.state in (JobState.DONE, JobState.FAILED):
            return status
        import time

        time.sleep(0.05)
        status = ops.poll(job_id)
    raise AssertionError(f"job {job_id} did not finish")


def check_dpo_checkpoint_count(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL, cluster_id=0, hyperparams=_hp(3), pairs=_sample_pairs()
    )
    status = _wait_done(ops, ops.submit(spec))
    assert status.state is JobState.DONE, status.message
    assert len(status.checkpoints) == 3, f"expected 3 checkpoints, got {len(status.checkpoints)}"
    assert [c.epoch for c in status.checkpoints] == [1, 2, 3]
    refs = [c.backend_ref for c in status.checkpoints]
    assert len(set(refs)) == 3, "checkpoint refs must be distinct"


def check_nll_validation_losses(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.NLL,
        cluster_id=1,
        hyperparams=_hp(2),
        records=_sample_records(),
        validation_records=_sample_records(2),
    )
    status = _wait_done(ops, ops.submit(spec))
    assert status.state is JobState.DONE, status.message
    assert len(status.checkpoints) == 2
    for ckpt in status.checkpoints:
        assert isinstance(ckpt.validation_loss, float), "nll checkpoints must report validation_loss"


def check_dpo_rejects_records(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL,
        cluster_id=2,
        hyperparams=_hp(1),
        records=_sample_records(),
    )
    try:
        ops.submit(spec)
    except (ValueError, ProtocolError):
        return
    raise AssertionError("dpo job with nll-style records must be rejected")


def check_nll_rejects_pairs(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.NLL, cluster_id=2, hyperparams=_hp(1), pairs=_sample_pairs()
    )
    try:
        ops.submit(spec)
    except (ValueError, ProtocolError):
        return
    raise AssertionError("nll job with preference pairs must be rejected")


def check_generate_base(ops: TrainerOps) -> None:
    text = ops.generate(
        [{"role": "user", "content": "Say something."}], adapter=None, temperature=0.1, max_tokens=64
    )
    assert isinstance(text, str) and text, "base generation must return non-empty text"


def check_generate_unknown_adapter(ops: TrainerOps) -> None:
    ref = "no-such-adapter-xyz"
    try:
        ops.generate([{"role": "user", "content": "hi"}], adapter=ref, temperature=0.1, max_tokens=16)
    except ProtocolError as exc:
        assert ref in str(exc), f"error must name the unknown ref, got: {exc}"
        return
    raise AssertionError("generation with an unknown adapter must fail")


def check_generate_trained_adapter(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL, cluster_id=3, hyperparams=_hp(2), pairs=_sample_pairs()
    )
    status = _wait_done(ops, ops.submit(spec))
    assert status.state is JobState.DONE, status.message
    ref = status.checkpoints[-1].backend_ref
    text = ops.generate(
        [{"role": "user", "content": "Draft note 9 covering the weekly plan."}],
        adapter=ref,
        temperature=0.1,
        max_tokens=128,
    )
    assert isinstance(text, str) and text


def check_poll_unknown_job(ops: TrainerOps) -> None:
    try:
        ops.poll("not-a-job")
    except ProtocolError:
        return
    raise AssertionError("polling an unknown job must fail with a protocol error")


def check_checkpoint_metrics(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL, cluster_id=4, hyperparams=_hp(2), pairs=_sample_pairs()
    )
    status = _wait_done(ops, ops.submit(spec))
    for ckpt in status.checkpoints:
        assert isinstance(dict(ckpt.metrics), dict)
        for key, value in dict(ckpt.metrics).items():
            assert isinstance(key, str) and isinstance(value, (int, float))


def check_resubmit_idempotent(ops: TrainerOps) -> None:
    spec = TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL, cluster_id=5, hyperparams=_hp(2), pairs=_sample_pairs()
    )
    first = _wait_done(ops, ops.submit(spec))
    second = _wait_done(ops, ops.submit(spec))
    assert len(first.checkpoints) == len(second.checkpoints)


TRAINER_CONFORMANCE_CASES: tuple[tuple[str, Callable[[TrainerOps], None]], ...] = (
    ("dpo_checkpoint_count", check_dpo_checkpoint_count),
    ("nll_validation_losses", check_nll_validation_losses),
    ("dpo_rejects_records", check_dpo_rejects_records),
    ("nll_rejects_pairs", check_nll_rejects_pairs),
    ("generate_base", check_generate_base),
    ("generate_unknown_adapter", check_generate_unknown_adapter),
    ("generate_trained_adapter", check_generate_trained_adapter),
    ("poll_unknown_job", check_poll_unknown_job),
    ("checkpoint_metrics", check_checkpoint_metrics),
    ("resubmit_idempotent", check_resubmit_idempotent),
)


def run_trainer_conformance(ops: TrainerOps) -> list[str]:
    """Run every fixture; returns passed case names, raises on the first
    failure with the case name in the message."""
    passed = []
    for name, check in TRAINER_CONFORMANCE_CASES:
        try:
            check(ops)
        except AssertionError as exc:
            raise AssertionError(f"conformance case {name!r} failed: {exc}") from exc
        passed.append(name)
    return passed


class MockTrainerOps:
    """Adapts the in-process mock pair (trainer + chat) to TrainerOps."""

    def __init__(self, trainer, chat):
        self.trainer = trainer
        self.chat_backend = chat

    def submit(self, spec: TrainJobSpec) -> str:
        return self.trainer.submit(spec)

    def poll(self, job_id: str):
        return self.trainer.poll(job_id)

    def generate(self, messages, adapter, temperature, max_tokens) -> str:
        from .base import ChatMessage

        request = ChatRequest(
            messages=tuple(ChatMessage(m["role"], m["content"]) for m in messages),
            temperature=temperature,
            max_tokens=max_tokens,
        )
        return self.chat_backend.chat(request, adapter=adapter)


def run_parity(backend_a, backend_b, calls: Sequence[tuple]) -> None:
    """Drive two backends with identical calls; semantic responses must
    match call for call (including the error class on failures)."""
    for call in calls:
        method, args = call[0], call[1:]
        results = []
        for backend in (backend_a, backend_b):
            try:
                results.append(("ok", getattr(backend, method)(*args)))
            except Exception as exc:  # noqa: BLE001 - parity includes error kinds
                results.append(("err", type(exc).__name__))
        (kind_a, val_a), (kind_b, val_b) = results
        assert kind_a == kind_b, f"{method}{args}: one side failed ({val_a} vs {val_b})"
        if kind_a == "ok":
            if hasattr(val_a, "__iter__") and not isinstance(val_a, (str, bytes)):
                import numpy as np

                for x, y in zip(val_a, val_b):
                    assert np.allclose(x, y), f"{method}{args}: outputs differ"
            else:
                assert val_a == val_b, f"{method}{args}: outputs differ"
        else:
            assert val_a == val_b, f"{method}{args}: error kinds differ"
