"""BLEU, reward-hacking filters, the judge harness, and the per-cluster
optimization state machine."""

from __future__ import annotations

import hashlib

import numpy as np
import pytest

from uno.backends import (
    ChatRequest,
    JobState,
    JobStatus,
    CheckpointInfo,
    TrainObjective,
)
from uno.config import EngineConfig
from uno.experience import (
    FilterReason,
    JudgeVerdict,
    bleu4,
    build_primary,
    build_reflective,
    hack_filter,
    judge_pairwise,
    judge_response,
    optimize_cluster,
    parse_judge_score,
)
from uno.gap import profile_cluster
from uno.types import ClusterStatus, PreferencePair, RuleSet, RuleSource
from oracles import bleu4_oracle

ORIGINAL = "alpha beta gamma delta epsilon zeta eta theta"


def _pairs(n, prefix="q"):
    rules = RuleSet(rules=("Always mention the term 'velvet'.",), source=RuleSource.DISTILLED)
    return [
        PreferencePair(
            session_id=f"{prefix}-{i:03d}",
            query=f"{prefix}-{i:03d}",
            chosen=ORIGINAL + " improved",
            rejected=ORIGINAL,
            rules=rules,
        )
        for i in range(n)
    ]


def _between(text, start, end=None):
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return text[i:j].strip() if j >= 0 else text[i:].strip()


class StubTrainer:
    """Deterministic trainer stub with controllable failures and losses."""

    def __init__(self, epochs=3, val_losses=None, fail_objectives=()):
        self.epochs = epochs
        self.val_losses = val_losses
        self.fail_objectives = set(fail_objectives)
        self._jobs = {}
        self._counter = 0

    def submit(self, spec):
        spec.validate()
        self._counter += 1
        job_id = f"job-{self._counter}"
        if spec.objective in self.fail_objectives:
            self._jobs[job_id] = JobStatus(job_id=job_id, state=JobState.FAILED, message="scripted failure")
            return job_id
        checkpoints = []
        for e in range(1, self.epochs + 1):
            loss = None
            if spec.objective is TrainObjective.NLL:
                loss = float(self.val_losses[e - 1]) if self.val_losses else 1.0 / e
            checkpoints.append(
                CheckpointInfo(
                    job_id=job_id,
                    epoch=e,
                    backend_ref=f"ckpt-{spec.objective.value}-e{e}",
                    validation_loss=loss,
                )
            )
        self._jobs[job_id] = JobStatus(job_id=job_id, state=JobState.DONE, checkpoints=tuple(checkpoints))
        return job_id

    def poll(self, job_id):
        return self._jobs[job_id]


class StubChat:
    """Plain generation echoes the original text (plus an adapter marker);
    judge prompts are scored by a caller-provided function."""

    def __init__(self, judge):
        self.judge = judge
        self.requests = []

    def chat(self, request: ChatRequest, adapter=None):
        prompt = request.last_user_content()
        self.requests.append((prompt, adapter))
        if "[task: judge-response]" in prompt:
            query = _between(prompt, "Query:", "Editing rules:")
            response = _between(prompt, "Answer to grade:")
            sample = int(_between(prompt, "(sample ", " of") or "1")
            return f"Score: {self.judge(query, response, sample)}"
        if adapter is not None:
            return f"{ORIGINAL} {adapter}"
        return f"{ORIGINAL} base"


class TestBleu:
    def test_identity_is_exactly_one(self):
        text = "one two three four five"
        assert bleu4(text, text) == 1.0

    def test_empty_candidate(self):
        assert bleu4("", "reference text here") == 0.0

    def test_short_identity_has_no_fourgrams(self):
        assert bleu4("one two three", "one two three") == 0.0

    def test_brevity_penalty_direction(self):
        ref = "a b c d e f g h"
        shorter = "a b c d"
        assert bleu4(shorter, ref) < bleu4(ref, ref)

    def test_unicode_nfc_normalization(self):
        composed = "café au lait très bon"
        decomposed = "café au lait très bon"
        assert bleu4(composed, decomposed) == 1.0

    def test_agrees_with_independent_oracle(self):
        rng = np.random.default_rng(11)
        vocab = ["red", "blue", "green", "fast", "slow", "cat", "dog", "runs", "sits", "very"]
        for _ in range(200):
            cand = " ".join(rng.choice(vocab, size=rng.integers(1, 15)))
            ref = " ".join(rng.choice(vocab, size=rng.integers(1, 15)))
            assert abs(bleu4(cand, ref) - bleu4_oracle(cand, ref)) <= 1e-9


class TestHackFilter:
    def test_newlines_only_is_empty(self):
        assert hack_filter("\n\n", ORIGINAL, 0.05) is FilterReason.EMPTY_AFTER_STRIP

    def test_special_tokens_only_is_empty(self):
        assert hack_filter("<|im_start|></s>\n<pad>", ORIGINAL, 0.05) is FilterReason.EMPTY_AFTER_STRIP

    def test_drifted_response_below_floor(self):
        drifted = "totally unrelated words that share nothing with it"
        assert bleu4(drifted, ORIGINAL) < 0.05
        assert hack_filter(drifted, ORIGINAL, 0.05) is FilterReason.BLEU_BELOW_FLOOR

    def test_ordinary_paraphrase_passes(self):
        paraphrase = ORIGINAL + " with a small addition"
        assert bleu4(paraphrase, ORIGINAL) > 0.3
        assert hack_filter(paraphrase, ORIGINAL, 0.05) is None


class TestJudgeParser:
    # fixture corpus of judge output formats
    CORPUS = [
        ("Score: 7", 7),
        ("score: 3", 3),
        ("Score = 9", 9),
        ("The final score is 8.", 8),
        ("Score: 10", 10),
        ("I would rate this 7/10.", 7),
        ("7 / 10", 7),
        ("4 out of 10", 4),
        ("[[9]]", 9),
        ("Rating: 6", 6),
        ("I rate this 4", 4),
        ("Grade: 5 for partial coverage", 5),
        ("Overall the quality merits a score of 9.", 9),
        ("Reasoning first, reasoning second. Score: 2", 2),
        ("I'd give it a 6.", 6),
        ("Final verdict => 2", 2),
        ("Score:\n8", 8),
        ("The answer addresses both rules fully, a clear 10", 10),
        ("no usable verdict here", None),
        ("scored 85% on coverage", None),
    ]

    @pytest.mark.parametrize("text,expected", CORPUS)
    def test_fixture_corpus(self, text, expected):
        assert parse_judge_score(text) == expected

    def test_corpus_has_twenty_formats(self):
        assert len(self.CORPUS) == 20


class TestJudging:
    def test_three_samples_averaged(self):
        chat = StubChat(judge=lambda q, r, sample: 6 + sample)  # 7, 8, 9
        score = judge_response("q", "rules", "resp", chat, samples=3, temperature=0.1)
        assert score == pytest.approx(8.0)

    def test_filtered_response_scores_zero_without_judge_calls(self):
        chat = StubChat(judge=lambda q, r, s: 9)
        score_a, score_b = judge_pairwise(
            "q", "rules", "resp-a", "resp-b", chat, samples=3,
            filtered_a=FilterReason.EMPTY_AFTER_STRIP,
        )
        assert score_a == 0.0
        assert score_b == 9.0
        judged = [p for p, _ in chat.requests if "[task: judge-response]" in p]
        assert len(judged) == 3  # only the unfiltered side
        assert all("resp-b" in p for p in judged)

    def test_all_samples_unparseable_scores_zero(self):
        class Mute(StubChat):
            def chat(self, request, adapter=None):
                if "[task: judge-response]" in request.last_user_content():
                    return "no usable verdict here"
                return super().chat(request, adapter)

        score = judge_response("q", "rules", "resp", Mute(judge=None), samples=2, temperature=0.1)
        assert score == 0.0


def _win_table_judge(win_idx_by_epoch, tie_idx_by_epoch=None):
    """Judge keyed on (epoch marker in response, item index in query)."""
    tie_idx_by_epoch = tie_idx_by_epoch or {}

    def judge(query, response, sample):
        idx = int(query.rsplit("-", 1)[1])
        if "ckpt-" in response:
            epoch = int(response.rsplit("-e", 1)[1].split()[0])
            if idx in tie_idx_by_epoch.get(epoch, ()):  # tie items score like base
                return 5
            return 9 if idx in win_idx_by_epoch.get(epoch, ()) else 1
        return 5

    return judge


class TestBuildPrimary:
    def _config(self, **kw):
        defaults = dict(judge_samples=1, epochs=3, min_cluster_train=2, min_cluster_critic=2)
        defaults.update(kw)
        return EngineConfig(**defaults)

    def test_degenerate_judge_always_prefers_checkpoint(self):
        chat = StubChat(judge=lambda q, r, s: 9 if "ckpt-" in r else 2)
        outcome = build_primary(0, _pairs(4), _pairs(4, prefix="v"), StubTrainer(), chat, self._config())
        assert outcome.accepted
        assert outcome.report.win_rate_best == 1.0
        assert outcome.adapter.metrics["win_rate"] == 1.0

    def test_win_rate_exactly_gamma_rejected(self):
        # 53 wins over 100 validation items = 0.53 exactly; strict > fails
        judge = _win_table_judge({e: set(range(53)) for e in (1, 2, 3)})
        chat = StubChat(judge=judge)
        outcome = build_primary(
            0, _pairs(4), _pairs(100, prefix="v"), StubTrainer(), chat, self._config()
        )
        assert outcome.report.win_rate_best == pytest.approx(0.53)
        assert not outcome.accepted
        assert outcome.adapter is None

    def test_best_epoch_is_argmax(self):
        # per-epoch win rates 0.4, 0.6, 0.5 over 5 items
        judge = _win_table_judge(
            win_idx_by_epoch={1: {0, 1}, 2: {0, 1, 2}, 3: {0, 1}},
            tie_idx_by_epoch={3: {2}},
        )
        chat = StubChat(judge=judge)
        outcome = build_primary(
            0, _pairs(4), _pairs(5, prefix="v"), StubTrainer(), chat, self._config()
        )
        assert list(outcome.report.per_epoch_win_rates) == pytest.approx([0.4, 0.6, 0.5])
        assert outcome.report.best_epoch == 2
        assert outcome.accepted  # 0.6 > 0.53
        assert outcome.adapter.backend_ref.endswith("-e2")

    def test_trainer_failure_is_rejection(self):
        chat = StubChat(judge=lambda q, r, s: 9)
        trainer = StubTrainer(fail_objectives={TrainObjective.DPO_PLUS_NLL})
        outcome = build_primary(0, _pairs(4), _pairs(4, prefix="v"), trainer, chat, self._config())
        assert not outcome.accepted
        assert "trainer failure" in outcome.reason

    def test_empty_validation_is_rejection(self):
        chat = StubChat(judge=lambda q, r, s: 9)
        outcome = build_primary(0, _pairs(4), [], StubTrainer(), chat, self._config())
        assert not outcome.accepted
        assert "validation" in outcome.reason

    def test_symmetric_judge_win_rate_near_half(self):
        def symmetric(query, response, sample):
            digest = hashlib.sha256(f"{query}|{response}|{sample}".encode()).digest()
            return digest[0] % 10 + 1

        chat = StubChat(judge=symmetric)
        outcome = build_primary(
            0,
            _pairs(4),
            _pairs(240, prefix="v"),
            StubTrainer(epochs=1),
            chat,
            self._config(epochs=1),
        )
        rate = outcome.report.per_epoch_win_rates[0]
        assert abs(rate - 0.5) < 0.1
        if outcome.accepted:
            assert outcome.report.win_rate_best > 0.53


class TestBuildReflective:
    def test_lowest_validation_loss_selected(self):
        trainer = StubTrainer(epochs=3, val_losses=[2.0, 1.5, 1.7])
        from uno.pipeline import critic_records

        records = critic_records(_pairs(4))
        adapter = build_reflective(0, records, records[:1], trainer, EngineConfig(epochs=3))
        assert adapter.epoch == 2
        assert adapter.metrics["validation_loss"] == 1.5

    def test_single_epoch_job(self):
        trainer = StubTrainer(epochs=1, val_losses=[0.9])
        from uno.pipeline import critic_records

        records = critic_records(_pairs(3))
        adapter = build_reflective(0, records, records[:1], trainer, EngineConfig(epochs=1))
        assert adapter.epoch == 1


class TestStateMachine:
    """Exhaustive gate-outcome enumeration for the per-cluster decision."""

    WIN = "win"
    EXACT = "exact_gamma"
    LOSE = "lose"

    def _run(self, gap_mean, train_n, winrate, dpo_ok, members, nll_ok):
        config = EngineConfig(
            judge_samples=1, epochs=1, min_cluster_train=2, min_cluster_critic=2, gamma=0.5
        )
        profile = profile_cluster(0, {"s": gap_mean}, config.tau_star)
        fail = set()
        if not dpo_ok:
            fail.add(TrainObjective.DPO_PLUS_NLL)
        if not nll_ok:
            fail.add(TrainObjective.NLL)
        trainer = StubTrainer(epochs=1, val_losses=[1.0], fail_objectives=fail)
        if winrate == self.WIN:
            judge = lambda q, r, s: 9 if "ckpt-" in r else 1
        elif winrate == self.EXACT:
            judge = lambda q, r, s: 5  # every item ties: win rate exactly 0.5 == gamma
        else:
            judge = lambda q, r, s: 1 if "ckpt-" in r else 9
        chat = StubChat(judge=judge)
        from uno.pipeline import critic_records

        train = _pairs(train_n)
        val = _pairs(2, prefix="v")
        return optimize_cluster(
            cluster_id=0,
            classification=profile.classification,
            train_pairs=train,
            validation_pairs=val,
            critic_train=critic_records(train),
            critic_validation=critic_records(val),
            member_count=members,
            trainer=trainer,
            chat=chat,
            config=config,
        )

    @pytest.mark.parametrize("gap_mean,expected_low", [(0.3, True), (0.45, True), (0.6, False)])
    def test_gap_boundary_classification(self, gap_mean, expected_low):
        result = self._run(gap_mean, train_n=4, winrate=self.WIN, dpo_ok=True, members=4, nll_ok=True)
        if expected_low:
            assert result.status is ClusterStatus.PRIMARY
        else:
            assert result.status is ClusterStatus.REFLECTIVE

    @pytest.mark.parametrize(
        "gap,train_n,winrate,dpo_ok,members,nll_ok,expected",
        [
            # low gap, primary attempt succeeds
            (0.3, 4, "win", True, 4, True, ClusterStatus.PRIMARY),
            (0.3, 4, "win", True, 1, True, ClusterStatus.PRIMARY),
            # low gap, win rate exactly at gamma -> strict > rejects -> reflective
            (0.3, 4, "exact_gamma", True, 4, True, ClusterStatus.REFLECTIVE),
            (0.3, 4, "exact_gamma", True, 4, False, ClusterStatus.FALLBACK),
            (0.3, 4, "exact_gamma", True, 1, True, ClusterStatus.FALLBACK),
            # low gap, verifier loses
            (0.3, 4, "lose", True, 4, True, ClusterStatus.REFLECTIVE),
            (0.3, 4, "lose", True, 4, False, ClusterStatus.FALLBACK),
            (0.3, 4, "lose", True, 1, True, ClusterStatus.FALLBACK),
            # low gap, expert trainer fails
            (0.3, 4, "win", False, 4, True, ClusterStatus.REFLECTIVE),
            (0.3, 4, "win", False, 4, False, ClusterStatus.FALLBACK),
            (0.3, 4, "win", False, 1, True, ClusterStatus.FALLBACK),
            # low gap, below min train size: primary skipped entirely
            (0.3, 1, "win", True, 4, True, ClusterStatus.REFLECTIVE),
            (0.3, 1, "win", True, 4, False, ClusterStatus.FALLBACK),
            (0.3, 1, "win", True, 1, True, ClusterStatus.FALLBACK),
            # high gap: no primary attempt regardless of the other gates
            (0.6, 4, "win", True, 4, True, ClusterStatus.REFLECTIVE),
            (0.6, 4, "win", True, 4, False, ClusterStatus.FALLBACK),
            (0.6, 4, "win", True, 1, True, ClusterStatus.FALLBACK),
            # boundary mean 0.45 classifies low (<=)
            (0.45, 4, "win", True, 4, True, ClusterStatus.PRIMARY),
        ],
    )
    def test_every_gate_combination_terminates_correctly(
        self, gap, train_n, winrate, dpo_ok, members, nll_ok, expected
    ):
        result = self._run(gap, train_n, winrate, dpo_ok, members, nll_ok)
        assert result.status is expected
        assert result.status in (
            ClusterStatus.PRIMARY,
            ClusterStatus.REFLECTIVE,
            ClusterStatus.FALLBACK,
        )
        if result.status is ClusterStatus.PRIMARY:
            assert result.adapter is not None and result.adapter.kind.value == "expert"
        if result.status is ClusterStatus.REFLECTIVE:
            assert result.adapter is not None and result.adapter.kind.value == "critic"
        if result.status is ClusterStatus.FALLBACK:
            assert result.adapter is None

    def test_no_primary_attempt_when_high_gap(self):
        result = self._run(0.9, train_n=4, winrate="win", dpo_ok=True, members=4, nll_ok=True)
        assert result.verifier is None  # verifier never ran
