"""Mock backends, HTTP clients, retries, and protocol parity."""

from __future__ import annotations

import threading
import time

import httpx
import numpy as np
import pytest

from uno.backends import (
    ChatRequest,
    ConsistencyError,
    EchoChat,
    HashingEmbedder,
    OverlapReranker,
    PairRecord,
    ProtocolError,
    RerankStats,
    RetryableError,
    ScriptedChat,
    SeqRecord,
    TableReranker,
    TrainHyperparams,
    TrainJobSpec,
    TrainObjective,
    build_mock_backends,
    rerank_score,
)
from uno.backends.conformance import MockTrainerOps, run_parity, run_trainer_conformance
from uno.backends.http import (
    HttpChatBackend,
    HttpEmbeddingBackend,
    HttpRerankBackend,
    HttpTrainerBackend,
)
from http_bridge import make_server_transport


def _dpo_spec(cluster_id=0, epochs=8, n=4):
    pairs = tuple(
        PairRecord(
            session_id=f"s{i}",
            query=f"query {i}",
            chosen=f"answer {i} with 'velvet'",
            rejected=f"answer {i}",
            rules=("Always mention the term 'velvet'.",),
        )
        for i in range(n)
    )
    return TrainJobSpec(
        objective=TrainObjective.DPO_PLUS_NLL,
        cluster_id=cluster_id,
        hyperparams=TrainHyperparams(epochs=epochs),
        pairs=pairs,
    )


class TestMocks:
    def test_echo_mock(self):
        chat = EchoChat()
        assert chat.chat(ChatRequest.user("hello there")) == "hello there"

    def test_hashing_embedder_deterministic(self):
        emb = HashingEmbedder(dim=16, seed=3)
        a1, a2 = emb.embed(["same text", "same text"])
        assert np.array_equal(a1, a2)
        again = HashingEmbedder(dim=16, seed=3).embed(["same text"])[0]
        assert np.array_equal(a1, again)

    def test_hashing_embedder_no_collisions_on_corpus(self):
        # includes an anagram pair, which bag-of-words alone would collide on
        corpus = [
            "the cat sat on the mat",
            "sat the cat on the mat",
            "completely different words here",
            "draft the weekly report",
            "draft the weekly reports",
            "",
        ]
        corpus = [c for c in corpus if c]
        vecs = HashingEmbedder(dim=16, seed=0).embed(corpus)
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                assert not np.array_equal(vecs[i], vecs[j]), (corpus[i], corpus[j])

    def test_embedder_rejects_empty_list(self):
        with pytest.raises(ValueError):
            HashingEmbedder(dim=8).embed([])

    def test_overlap_reranker_identity_is_zero(self):
        rr = OverlapReranker()
        rule = "Always mention the term 'deadline'."
        assert rr.score(rule, [rule, "Use a formal tone."]) == 0.0

    def test_overlap_reranker_disjoint_is_high(self):
        rr = OverlapReranker()
        score = rr.score(
            "Always mention the term 'zeppelin'.", ["Always mention the term 'quartz'."]
        )
        assert score > 0.5

    def test_rerank_clamping_counts(self, caplog):
        backend = TableReranker({"wild": 1.3, "negative": -0.2}, default=0.4)
        stats = RerankStats()
        assert rerank_score(backend, "wild", ["x"], stats) == 1.0
        assert rerank_score(backend, "negative", ["x"], stats) == 0.0
        assert rerank_score(backend, "normal", ["x"], stats) == 0.4
        assert stats.clamped == 2

    def test_chat_unknown_adapter_names_ref(self, mocks):
        with pytest.raises(ProtocolError, match="missing-ref"):
            mocks.chat.chat(ChatRequest.user("hello"), adapter="missing-ref")

    def test_mock_chat_determinism(self):
        a = build_mock_backends(seed=11, embed_dim=8)
        b = build_mock_backends(seed=11, embed_dim=8)
        req = ChatRequest.user("Draft the onboarding doc.")
        assert a.chat.chat(req) == b.chat.chat(req)

    def test_trainer_eight_epochs_eight_checkpoints(self, mocks):
        job_id = mocks.trainer.submit(_dpo_spec(epochs=8))
        status = mocks.trainer.poll(job_id)
        assert len(status.checkpoints) == 8
        assert [c.epoch for c in status.checkpoints] == list(range(1, 9))

    def test_nll_checkpoints_record_losses(self, mocks):
        spec = TrainJobSpec(
            objective=TrainObjective.NLL,
            cluster_id=1,
            hyperparams=TrainHyperparams(epochs=4),
            records=tuple(
                SeqRecord(
                    session_id=f"s{i}",
                    input_query="q",
                    input_response="r",
                    target="1. Always mention the term 'velvet'.",
                )
                for i in range(3)
            ),
        )
        status = mocks.trainer.poll(mocks.trainer.submit(spec))
        losses = [c.validation_loss for c in status.checkpoints]
        assert all(isinstance(x, float) for x in losses)

    def test_dpo_with_records_is_validation_error(self, mocks):
        spec = TrainJobSpec(
            objective=TrainObjective.DPO_PLUS_NLL,
            cluster_id=0,
            hyperparams=TrainHyperparams(epochs=2),
            records=(SeqRecord(session_id="s", input_query="q", input_response="r", target="t"),),
        )
        with pytest.raises(ValueError):
            mocks.trainer.submit(spec)

    def test_scripted_chat_matches_substring(self):
        chat = ScriptedChat([("alpha", "first"), ("beta", "second")], default="fallthrough")
        assert chat.chat(ChatRequest.user("prefix alpha suffix")) == "first"
        assert chat.chat(ChatRequest.user("nothing matches")) == "fallthrough"

    def test_trainer_conformance_suite_on_mock(self, mocks):
        passed = run_trainer_conformance(MockTrainerOps(mocks.trainer, mocks.chat))
        assert len(passed) == 10


class TestHttpClients:
    def test_retry_two_transient_failures_then_success(self):
        calls = {"n": 0}

        def handler(request: httpx.Request) -> httpx.Response:
            calls["n"] += 1
            if calls["n"] <= 2:
                return httpx.Response(503)
            return httpx.Response(
                200, json={"choices": [{"message": {"role": "assistant", "content": "done"}}]}
            )

        client = HttpChatBackend(
            "http://test", retries=3, backoff=0.0, transport=httpx.MockTransport(handler)
        )
        assert client.chat(ChatRequest.user("hi")) == "done"
        assert client.attempts_logged == 3

    def test_retry_budget_exhausted(self):
        client = HttpChatBackend(
            "http://test",
            retries=3,
            backoff=0.0,
            transport=httpx.MockTransport(lambda r: httpx.Response(503)),
        )
        with pytest.raises(RetryableError, match="after 3 attempts"):
            client.chat(ChatRequest.user("hi"))

    def test_client_error_is_protocol_error_not_retried(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(400, json={"error": "bad request"})

        client = HttpChatBackend(
            "http://test", retries=3, backoff=0.0, transport=httpx.MockTransport(handler)
        )
        with pytest.raises(ProtocolError):
            client.chat(ChatRequest.user("hi"))
        assert calls["n"] == 1

    def test_malformed_response_is_protocol_error(self):
        transport = httpx.MockTransport(lambda r: httpx.Response(200, json={"nope": 1}))
        client = HttpChatBackend("http://test", transport=transport)
        with pytest.raises(ProtocolError, match="malformed"):
            client.chat(ChatRequest.user("hi"))

    def test_embedding_dimension_drift_fatal(self):
        dims = iter([3, 3, 4])

        def handler(request):
            d = next(dims)
            return httpx.Response(200, json={"data": [{"index": 0, "embedding": [0.1] * d}]})

        client = HttpEmbeddingBackend("http://test", transport=httpx.MockTransport(handler))
        client.embed(["a"])
        client.embed(["b"])
        with pytest.raises(ConsistencyError, match="drift"):
            client.embed(["c"])

    def test_in_flight_bound_respected(self):
        active = {"now": 0, "peak": 0}
        lock = threading.Lock()

        def handler(request):
            with lock:
                active["now"] += 1
                active["peak"] = max(active["peak"], active["now"])
            time.sleep(0.02)
            with lock:
                active["now"] -= 1
            return httpx.Response(
                200, json={"choices": [{"message": {"role": "assistant", "content": "ok"}}]}
            )

        client = HttpChatBackend(
            "http://test", max_in_flight=2, transport=httpx.MockTransport(handler)
        )
        threads = [
            threading.Thread(target=client.chat, args=(ChatRequest.user(f"m{i}"),)) for i in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert active["peak"] <= 2


class TestProtocolParity:
    """Same requests through the HTTP client and the in-process mock must
    yield the same semantic responses, including error kinds."""

    def test_chat_embed_rerank_parity(self):
        mocks = build_mock_backends(seed=5, embed_dim=8)
        transport = make_server_transport(mocks)
        http_chat = HttpChatBackend("http://bridge", transport=transport)
        http_embed = HttpEmbeddingBackend("http://bridge", transport=transport)
        http_rerank = HttpRerankBackend("http://bridge", transport=transport)

        run_parity(
            mocks.chat,
            http_chat,
            [
                ("chat", ChatRequest.user("Outline the migration plan.")),
                ("chat", ChatRequest.user("Outline the migration plan."), "nonexistent-adapter"),
            ],
        )
        run_parity(
            mocks.embed,
            http_embed,
            [
                ("embed", ["alpha beta", "gamma delta"]),
                ("embed", []),
            ],
        )
        run_parity(
            mocks.rerank,
            http_rerank,
            [
                ("score", "Always mention the term 'velvet'.", ["Always mention the term 'velvet'."]),
                ("score", "Keep it short.", ["Use formal tone.", "Cite sources."]),
            ],
        )

    def test_trainer_conformance_over_http(self):
        mocks = build_mock_backends(seed=5, embed_dim=8)
        transport = make_server_transport(mocks)
        trainer = HttpTrainerBackend("http://bridge", transport=transport)
        passed = run_trainer_conformance(trainer)
        assert len(passed) == 10
