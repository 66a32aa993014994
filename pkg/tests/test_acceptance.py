"""Acceptance criteria, one test per criterion, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass line per
criterion.  Everything here runs against the in-process mock backends.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from uno.backends import build_mock_backends
from uno.backends.base import ChatRequest
from uno.clustering import ward_cluster
from uno.config import BackendConfig, EngineConfig, RunConfig
from uno.experience import bleu4
from uno.pipeline import Pipeline, make_backends, report
from uno.router import route_and_respond
from uno.simulator import SimSpec, eval_queries, generate, oracle_eval, write_log_and_key
from uno.store import ArtifactStore
from uno.theory import run_noise_bound_suite, run_variance_bound_suite
from uno.types import ClusterStatus, RoutePath
from oracles import bleu4_oracle, ward_oracle


def _ok(name: str, detail: str = "") -> None:
    print(f"\n[ACCEPTANCE] {name}: PASS {detail}")


def _pipeline_store(tmp_path, name, spec: SimSpec, judge_mode="rules", seed=None, epochs=4):
    corpus = generate(spec)
    sim_dir = tmp_path / f"{name}-sim"
    log_path, key_path = write_log_and_key(corpus, sim_dir)
    config = RunConfig(
        engine=EngineConfig(seed=spec.seed if seed is None else seed, epochs=epochs, judge_samples=3),
        backends=BackendConfig(
            mode="mock", embed_dim=64, mock_world=str(key_path), judge_mode=judge_mode
        ),
    )
    store = ArtifactStore(tmp_path / name)
    backends = make_backends(config)
    Pipeline(config=config, store=store, backends=backends, log_path=log_path).run("all")
    return corpus, config, store, backends


def test_c01_ward_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    for trial in range(500):
        n = int(rng.integers(2, 13))
        d = int(rng.integers(1, 9))
        scale = float(rng.choice([0.3, 1.0, 4.0]))
        X = rng.normal(size=(n, d)) * scale
        eps = float(rng.choice([0.5, 2.0, 4.0, 25.0]))
        result = ward_cluster(X, eps)
        part, merges, rejected = ward_oracle(X, eps)
        assert result.partition == part, f"trial {trial}: partition mismatch"
        assert [(m.left, m.right, m.cost) for m in result.merges] == merges, (
            f"trial {trial}: merge trace mismatch"
        )
        assert result.rejected_cost == rejected, f"trial {trial}: rejected cost mismatch"
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    _ok("C01 ward oracle equivalence", f"(500 datasets, {elapsed:.1f}s)")


def test_c02_ward_monotonicity_and_stopping():
    rng = np.random.default_rng(202)
    rejected_seen = 0
    for _ in range(1000):
        n = int(rng.integers(2, 16))
        d = int(rng.integers(1, 6))
        X = rng.normal(size=(n, d)) * float(rng.choice([0.2, 1.0, 3.0]))
        eps = float(rng.uniform(0.05, 6.0))
        result = ward_cluster(X, eps)
        costs = [m.cost for m in result.merges]
        assert all(a <= b for a, b in zip(costs, costs[1:])), "accepted costs must be non-decreasing"
        assert all(c <= eps for c in costs), "accepted costs must stay within epsilon"
        if result.rejected_cost is not None:
            rejected_seen += 1
            assert result.rejected_cost > eps, "first rejected candidate must exceed epsilon"
    assert rejected_seen > 100  # the sweep actually exercises the stopping rule
    _ok("C02 ward monotonicity and stopping", f"(1000 datasets, {rejected_seen} with a rejection)")


def test_c03_bleu_oracle_equivalence():
    rng = np.random.default_rng(303)
    vocab = ["red", "blue", "green", "cat", "dog", "runs", "sits", "very", "fast", "slow",
             "north", "south", "gate", "mill", "stone"]
    worst = 0.0
    for _ in range(200):
        cand = " ".join(rng.choice(vocab, size=int(rng.integers(1, 18))))
        ref = " ".join(rng.choice(vocab, size=int(rng.integers(1, 18))))
        diff = abs(bleu4(cand, ref) - bleu4_oracle(cand, ref))
        worst = max(worst, diff)
        assert diff <= 1e-9
    for tokens in (4, 7, 12):
        text = " ".join(rng.choice(vocab, size=tokens))
        assert bleu4(text, text) == 1.0
    _ok("C03 bleu oracle equivalence", f"(200 pairs, max |diff| = {worst:.2e})")


def test_c04_theorem1_noise_risk_bound():
    start = time.monotonic()
    result = run_noise_bound_suite(count=50, n_samples=100_000, seed=404)
    elapsed = time.monotonic() - start
    failures = [r for r in result["configurations"] if not r["passed"]]
    assert not failures, failures[:3]
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    margin = min(r["bound"] - r["empirical_posterior"] for r in result["configurations"])
    _ok("C04 theorem-1 noise risk bound", f"(50 configs, {elapsed:.1f}s, min margin {margin:+.4f})")


def test_c05_theorem2_variance_bound():
    positive = run_variance_bound_suite(runs=100, seed=505, C=1.0, L_psi=1.0, lipschitz=True)
    assert positive["all_passed"], [r for r in positive["rows"] if not r["passed"]][:3]
    negative = run_variance_bound_suite(runs=5, seed=606, C=1.0, L_psi=1.0, lipschitz=False)
    assert negative["violations"] >= 1, "non-Lipschitz generator must violate the bound"
    _ok(
        "C05 theorem-2 variance bound",
        f"({positive['clusters_checked']} clusters pass; negative control "
        f"{negative['violations']} violations)",
    )


def test_c06_state_machine_exhaustiveness():
    # every gate combination, plus both stated boundaries, via the unit
    # machinery exercised exhaustively in test_experience
    from test_experience import TestStateMachine
    from uno.types import ClusterStatus as CS

    machine = TestStateMachine()
    combos = 0
    for gap in (0.3, 0.45, 0.6):
        for train_n in (4, 1):
            for winrate in ("win", "exact_gamma", "lose"):
                for dpo_ok in (True, False):
                    for members in (4, 1):
                        for nll_ok in (True, False):
                            result = machine._run(gap, train_n, winrate, dpo_ok, members, nll_ok)
                            combos += 1
                            assert result.status in (CS.PRIMARY, CS.REFLECTIVE, CS.FALLBACK)
                            low = gap <= 0.45
                            primary_possible = (
                                low and train_n >= 2 and dpo_ok and winrate == "win"
                            )
                            if primary_possible:
                                assert result.status is CS.PRIMARY
                            elif members >= 2 and nll_ok:
                                assert result.status is CS.REFLECTIVE
                            else:
                                assert result.status is CS.FALLBACK
    # stated boundaries: win rate exactly 0.53 rejects; mean exactly 0.45 is low-gap
    from uno.gap import profile_cluster
    from uno.types import GapClass

    assert profile_cluster(0, {"s": 0.45}, 0.45).classification is GapClass.LOW
    exact = machine._run(0.3, 4, "exact_gamma", True, 4, True)
    assert exact.status is CS.REFLECTIVE and exact.verifier.win_rate_best == 0.5
    _ok("C06 state-machine exhaustiveness", f"({combos} gate combinations)")


def test_c06b_win_rate_exactly_053_rejects():
    # the gamma boundary at the paper value, exact: 53 wins over 100 items
    from test_experience import StubChat, StubTrainer, _pairs, _win_table_judge

    judge = _win_table_judge({e: set(range(53)) for e in (1, 2)})
    outcome = __import__("uno.experience", fromlist=["build_primary"]).build_primary(
        0,
        _pairs(4),
        _pairs(100, prefix="v"),
        StubTrainer(epochs=2),
        StubChat(judge=judge),
        EngineConfig(judge_samples=1, epochs=2, min_cluster_train=2),
    )
    assert outcome.report.win_rate_best == pytest.approx(0.53)
    assert not outcome.accepted
    _ok("C06b win rate exactly 0.53 rejected (strict >)")


def test_c07_noise_robustness(tmp_path):
    # leg 1: all-noise chatter logs distill to nothing; every routed query
    # answers byte-identically to the base policy
    spec = SimSpec(n_sessions=200, alpha=0.0, n_topics=4, noise_style="empty_chatter", seed=70)
    corpus, config, store, backends = _pipeline_store(
        tmp_path, "noise-chatter", spec, judge_mode="honest_noise"
    )
    finals = store.load_final_clusters()
    assert len(finals) == 0  # nothing survives distillation
    queries, _ = eval_queries(corpus.world, 20, seed=1)
    for qid, query in queries:
        routed = route_and_respond(qid, query, backends.embed, finals, backends.chat, config.engine)
        base = backends.chat.chat(ChatRequest.user(query, temperature=config.engine.temperature))
        assert routed.decision.path is RoutePath.FALLBACK
        assert routed.response == base, "fallback responses must be byte-identical to base policy"

    # leg 2: contradictory noise sneaks past the gap pre-filter, so the
    # honest judge gate must do the rejecting: zero primary modules
    spec2 = SimSpec(n_sessions=200, alpha=0.0, n_topics=4, noise_style="contradictory_rules", seed=71)
    _, config2, store2, _ = _pipeline_store(
        tmp_path, "noise-contradictory", spec2, judge_mode="honest_noise"
    )
    finals2 = store2.load_final_clusters()
    assert finals2, "contradictory noise must form clusters"
    assert sum(1 for c in finals2 if c.status is ClusterStatus.PRIMARY) == 0
    verifier_reports = store2.load_verifier_reports()
    assert verifier_reports, "primary attempts must have reached the verifier gate"
    assert all(not r["report"]["accepted"] for r in verifier_reports)
    _ok(
        "C07 noise robustness",
        f"(chatter: {len(queries)} byte-identical fallbacks; contradictory: "
        f"{len(verifier_reports)} verifier rejections, 0 primary)",
    )


def test_c08_positive_adaptivity(tmp_path):
    start = time.monotonic()
    spec = SimSpec(n_sessions=400, alpha=0.9, n_topics=4, rules_per_topic=2, seed=80)
    corpus, config, store, backends = _pipeline_store(tmp_path, "adaptivity", spec, epochs=8)
    finals = store.load_final_clusters()
    n_primary = sum(1 for c in finals if c.status is ClusterStatus.PRIMARY)
    assert n_primary >= 1, report(store)[0]

    queries, key = eval_queries(corpus.world, 100, seed=2)
    routed_responses = {}
    base_responses = {}
    for qid, query in queries:
        routed = route_and_respond(qid, query, backends.embed, finals, backends.chat, config.engine)
        routed_responses[qid] = routed.response
        base_responses[qid] = backends.chat.chat(
            ChatRequest.user(query, temperature=config.engine.temperature)
        )
    routed_score, _ = oracle_eval(routed_responses, key)
    base_score, _ = oracle_eval(base_responses, key)
    elapsed = time.monotonic() - start
    assert routed_score.value > base_score.value, (
        f"routed {routed_score.value:.3f} must beat base {base_score.value:.3f}"
    )
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    _ok(
        "C08 positive adaptivity",
        f"(oracle routed {routed_score.value:.3f} > base {base_score.value:.3f}; "
        f"{n_primary} primary clusters; {elapsed:.1f}s)",
    )


def test_c09_pipeline_determinism(tmp_path):
    spec = SimSpec(n_sessions=150, alpha=0.8, n_topics=3, seed=90)
    corpus = generate(spec)
    log_path, key_path = write_log_and_key(corpus, tmp_path / "sim")
    config = RunConfig(
        engine=EngineConfig(seed=90, epochs=3, judge_samples=3),
        backends=BackendConfig(mode="mock", embed_dim=64, mock_world=str(key_path)),
    )

    def run(name):
        store = ArtifactStore(tmp_path / name)
        Pipeline(config=config, store=store, backends=make_backends(config), log_path=log_path).run("all")
        return {
            str(p.relative_to(store.root)): p.read_bytes()
            for p in sorted(store.root.rglob("*"))
            if p.is_file() and p.name not in ("timestamps.json", ".lock")
        }

    bytes_a = run("det-a")
    bytes_b = run("det-b")
    assert bytes_a.keys() == bytes_b.keys()
    differing = [rel for rel in bytes_a if bytes_a[rel] != bytes_b[rel]]
    assert not differing, f"files differ between identical runs: {differing[:5]}"
    _ok("C09 pipeline determinism", f"({len(bytes_a)} files byte-identical)")


def test_c10_routing_boundary_and_call_counts():
    import math

    from uno.backends import TableEmbedder
    from uno.router import respond, route
    from uno.types import AdapterHandle, AdapterKind, ClusterRecord, RouteDecision

    def unit_at(d):
        cos = 1 - d * d / 2
        return [cos, math.sqrt(max(0.0, 1 - cos * cos)), 0.0, 0.0]

    def cluster(cid, centroid, status=ClusterStatus.FALLBACK, adapter=None):
        return ClusterRecord(
            cluster_id=cid,
            member_session_ids=(f"s{cid}",),
            centroid_full=tuple(list(centroid) + [0.0] * 4),
            centroid_query=tuple(centroid),
            status=status,
            adapter=adapter,
        )

    config = EngineConfig()  # d = 1.2 default
    e1 = [1.0, 0.0, 0.0, 0.0]
    inside = route("a", "q-in", TableEmbedder({"q-in": unit_at(1.19)}), [cluster(0, e1)], config.outlier_distance)
    outside = route("b", "q-out", TableEmbedder({"q-out": unit_at(1.21)}), [cluster(0, e1)], config.outlier_distance)
    assert inside.chosen_cluster == 0 and inside.distance == pytest.approx(1.19, abs=1e-9)
    assert outside.path is RoutePath.FALLBACK and outside.distance == pytest.approx(1.21, abs=1e-9)

    class Counting:
        def __init__(self):
            self.calls = []

        def chat(self, request, adapter=None):
            self.calls.append(adapter)
            prompt = request.last_user_content()
            if "[task: critique]" in prompt:
                return "1. Mention the term 'focus'."
            if "[task: revise-with-critique]" in prompt:
                return "final"
            return "base"

    expert = AdapterHandle(AdapterKind.EXPERT, "ref-e", 1, {"win_rate": 0.9})
    critic = AdapterHandle(AdapterKind.CRITIC, "ref-c", 1)
    clusters = [
        cluster(0, e1, ClusterStatus.PRIMARY, expert),
        cluster(1, [0.0, 1.0, 0.0, 0.0], ClusterStatus.REFLECTIVE, critic),
    ]
    chat = Counting()
    respond("q", RouteDecision("q", 0, 0.0, RoutePath.PRIMARY), clusters, chat, config)
    assert chat.calls == ["ref-e"], "primary path must issue exactly one expert call"
    chat = Counting()
    respond("q", RouteDecision("q", 1, 0.0, RoutePath.REFLECTIVE), clusters, chat, config)
    assert chat.calls == [None, "ref-c", None], "reflective path must go base/critic/base"
    _ok("C10 routing boundary and call counts", "(1.19 in / 1.21 out; 1 and 3 calls)")


def test_c11_online_evolution_gates(tmp_path):
    from test_evolution import TestClusterCountChange, TestCriticGate, TestExpertGate
    from uno.evolution import evolve

    # rule 1: expert kept only when the win-rate gain exceeds 0.03
    expert = TestExpertGate()
    store, new_log, config, bundle = expert._setup(tmp_path / "kept", win_count=16)
    kept = evolve(store, new_log, config, bundle)
    assert {a.action for a in kept.actions} == {"continued"}
    store, new_log, config, bundle = expert._setup(tmp_path / "retrain", win_count=15)
    retrained = evolve(store, new_log, config, bundle)
    assert {a.action for a in retrained.actions} == {"retrained_full"}

    # rule 2: critic replaced only when the validation loss drops by > 0.2
    critic = TestCriticGate()
    store, new_log, config, bundle = critic._setup(
        tmp_path / "critic", loss_by_cluster={0: [1.6, 1.35, 1.5], 1: [1.5, 1.25, 1.4]}
    )
    result = evolve(store, new_log, config, bundle)
    actions = {a.cluster_id: a.action for a in result.actions}
    assert actions == {0: "kept_old_critic", 1: "replaced_critic"}

    # rule 3: a changed cluster count adopts the new clustering wholesale
    count = TestClusterCountChange()
    count.test_new_topic_triggers_full_readoption(tmp_path / "count")
    _ok(
        "C11 online evolution gates",
        "(win-rate gate 0.64 kept / 0.60 retrained; loss gate 0.15 kept / 0.25 replaced; "
        "count change re-adopted)",
    )
