"""Embedding providers: determinism, geometry, and HTTP client behavior."""

from __future__ import annotations

import json
import math

import httpx
import pytest

from soapgen import (
    EmbeddingVector,
    HttpEmbedder,
    MockEmbedder,
    PipelineConfig,
    ProviderError,
    make_embedder,
)

from oracles import oracle_cosine_scores


class TestEmbeddingVector:
    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingVector((1.0, 2.0), 3, "t")

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            EmbeddingVector((1.0, float("nan")), 2, "t")
        with pytest.raises(ValueError):
            EmbeddingVector((float("inf"), 0.0), 2, "t")

    def test_cosine_zero_vector(self):
        zero = EmbeddingVector((0.0, 0.0), 2, "t")
        unit = EmbeddingVector((1.0, 0.0), 2, "t")
        assert zero.cosine(unit) == 0.0

    def test_dot_and_norm(self):
        a = EmbeddingVector((3.0, 4.0), 2, "t")
        b = EmbeddingVector((1.0, 0.0), 2, "t")
        assert a.norm() == pytest.approx(5.0)
        assert a.dot(b) == pytest.approx(3.0)
        assert a.cosine(b) == pytest.approx(0.6)


class TestMockEmbedder:
    def test_bitwise_determinism_across_instances(self):
        a = MockEmbedder(seed=7, dim=32)
        b = MockEmbedder(seed=7, dim=32)
        va = a.embed_texts(["chest pain radiating to arm"])[0]
        vb = b.embed_texts(["chest pain radiating to arm"])[0]
        assert va.values == vb.values

    def test_seed_changes_vectors(self):
        a = MockEmbedder(seed=1, dim=32)
        b = MockEmbedder(seed=2, dim=32)
        va = a.embed_texts(["chest pain"])[0]
        vb = b.embed_texts(["chest pain"])[0]
        assert va.values != vb.values

    def test_unit_norm(self, mock_embedder):
        for text in ("fever", "chest pain and cough", "a b c d e f"):
            vec = mock_embedder.embed_texts([text])[0]
            assert vec.norm() == pytest.approx(1.0, abs=1e-12)

    def test_self_cosine_one(self, mock_embedder):
        vec = mock_embedder.embed_texts(["shortness of breath"])[0]
        assert vec.cosine(vec) == pytest.approx(1.0, abs=1e-12)

    def test_case_and_punctuation_invariance(self, mock_embedder):
        a = mock_embedder.embed_texts(["Chest Pain!!"])[0]
        b = mock_embedder.embed_texts(["chest pain"])[0]
        assert a.values == b.values

    def test_pinned_cosines(self, mock_embedder):
        texts = ["chest pain", "chest pressure", "ankle swelling"]
        va, vb, vc = mock_embedder.embed_texts(texts)
        assert va.cosine(vb) == pytest.approx(0.6426240959538341, abs=1e-12)
        assert va.cosine(vc) == pytest.approx(-0.004881006086633642, abs=1e-12)

    def test_overlap_implies_similarity(self, mock_embedder):
        va, vb, vc = mock_embedder.embed_texts(
            ["chest pain severe", "chest pain mild", "renal function normal"]
        )
        assert va.cosine(vb) > va.cosine(vc)

    def test_empty_inputs_rejected(self, mock_embedder):
        with pytest.raises(ValueError):
            mock_embedder.embed_texts([])
        with pytest.raises(ValueError):
            mock_embedder.embed_texts(["fine", ""])

    def test_punctuation_only_text_gets_stable_vector(self, mock_embedder):
        a = mock_embedder.embed_texts(["!!!"])[0]
        b = mock_embedder.embed_texts(["!!!"])[0]
        assert a.values == b.values
        assert a.norm() == pytest.approx(1.0, abs=1e-12)

    def test_token_sequence_kind(self, mock_embedder):
        [seq] = mock_embedder.embed_texts(["chest pain"], kind="token_sequence")
        assert len(seq) == 2
        for vec in seq:
            assert vec.norm() == pytest.approx(1.0, abs=1e-12)
        # token vectors are the building blocks of the text vector
        direct = mock_embedder.embed_texts(["chest"])[0]
        assert seq[0].cosine(direct) == pytest.approx(1.0, abs=1e-12)

    def test_provider_tag_carries_dim(self):
        assert MockEmbedder(dim=16).provider_tag == "mock-hash-16"

    def test_cosine_matches_oracle(self, mock_embedder):
        docs = ["chest pain", "cough and fever", "ankle swelling", "chest tightness"]
        qv = mock_embedder.embed_texts(["chest pain today"])[0]
        dvs = mock_embedder.embed_texts(docs)
        expected = oracle_cosine_scores(
            {d: list(v.values) for d, v in zip(docs, dvs)}, list(qv.values)
        )
        for doc, vec in zip(docs, dvs):
            assert qv.cosine(vec) == pytest.approx(expected[doc], abs=1e-12)


class StubTransport(httpx.BaseTransport):
    """Programmable transport: pops one scripted response per request."""

    def __init__(self, script):
        self.script = list(script)
        self.requests: list[dict] = []

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(json.loads(request.content))
        status, body = self.script.pop(0)
        return httpx.Response(status, json=body)


def http_embedder(script, **kwargs) -> tuple[HttpEmbedder, StubTransport]:
    transport = StubTransport(script)
    emb = HttpEmbedder(
        base_url="http://embed.test/v1", retries=kwargs.pop("retries", 1),
        backoff=0.0, dim=kwargs.pop("dim", 2), **kwargs,
    )
    emb._client = httpx.Client(transport=transport)
    return emb, transport


def embed_body(vectors) -> dict:
    return {"data": [{"embedding": list(v)} for v in vectors]}


class TestHttpEmbedder:
    def test_requires_base_url(self, monkeypatch):
        monkeypatch.delenv("SOAPGEN_EMBED_URL", raising=False)
        with pytest.raises(ProviderError):
            HttpEmbedder()

    def test_round_trip(self):
        emb, transport = http_embedder([(200, embed_body([[1.0, 0.0]]))])
        [vec] = emb.embed_texts(["hello"])
        assert vec.values == (1.0, 0.0)
        assert transport.requests[0]["input"] == ["hello"]

    def test_api_key_header(self):
        transport = StubTransport([(200, embed_body([[0.0, 1.0]]))])
        emb = HttpEmbedder(
            base_url="http://embed.test/v1", api_key="sk-test", dim=2, retries=0
        )
        captured = {}

        class HeaderTransport(httpx.BaseTransport):
            def handle_request(self, request):
                captured["auth"] = request.headers.get("authorization")
                return transport.handle_request(request)

        emb._client = httpx.Client(transport=HeaderTransport())
        emb.embed_texts(["x"])
        assert captured["auth"] == "Bearer sk-test"

    def test_batching_splits_requests(self):
        script = [
            (200, embed_body([[1.0, 0.0], [0.0, 1.0]])),
            (200, embed_body([[0.5, 0.5]])),
        ]
        emb, transport = http_embedder(script, batch_size=2)
        out = emb.embed_texts(["a", "b", "c"])
        assert len(out) == 3
        assert [len(r["input"]) for r in transport.requests] == [2, 1]

    def test_retry_then_success(self):
        script = [
            (500, {"error": "boom"}),
            (200, embed_body([[1.0, 0.0]])),
        ]
        emb, transport = http_embedder(script, retries=2)
        [vec] = emb.embed_texts(["a"])
        assert vec.values == (1.0, 0.0)
        assert len(transport.requests) == 2

    def test_exhausted_retries_raise_provider_error(self):
        script = [(500, {}), (500, {}), (500, {})]
        emb, _ = http_embedder(script, retries=2)
        with pytest.raises(ProviderError):
            emb.embed_texts(["a"])

    def test_malformed_body_raises_provider_error(self):
        emb, _ = http_embedder([(200, {"unexpected": []})], retries=0)
        with pytest.raises(ProviderError):
            emb.embed_texts(["a"])

    def test_cache_suppresses_duplicate_requests(self):
        script = [(200, embed_body([[1.0, 0.0]]))]
        emb, transport = http_embedder(script, cache_size=8)
        first = emb.embed_texts(["same text"])[0]
        second = emb.embed_texts(["same text"])[0]
        assert first.values == second.values
        assert len(transport.requests) == 1

    def test_token_sequence_embeds_tokens(self):
        script = [(200, embed_body([[1.0, 0.0], [0.0, 1.0]]))]
        emb, transport = http_embedder(script)
        [seq] = emb.embed_texts(["chest pain"], kind="token_sequence")
        assert len(seq) == 2
        assert transport.requests[0]["input"] == ["chest", "pain"]


class TestMakeEmbedder:
    def test_mock_by_default(self):
        config = PipelineConfig(mock_providers=True, embed_dim=16)
        emb = make_embedder(config)
        assert isinstance(emb, MockEmbedder)
        assert emb.dim == 16
        assert emb.seed == config.rng_seed

    def test_seed_override(self):
        config = PipelineConfig(mock_providers=True)
        assert make_embedder(config, seed=99).seed == 99

    def test_http_when_mock_disabled(self, monkeypatch):
        monkeypatch.setenv("SOAPGEN_EMBED_URL", "http://embed.test/v1")
        config = PipelineConfig(mock_providers=False)
        emb = make_embedder(config)
        assert isinstance(emb, HttpEmbedder)
