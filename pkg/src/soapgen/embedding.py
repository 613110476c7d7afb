"""Uniform interface to text-embedding providers, with a deterministic
offline mock backing dense retrieval and the semantic-similarity metric."""

from __future__ import annotations

import hashlib
import math
import os
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Literal, Protocol, Sequence

import httpx

EmbedKind = Literal["document", "query", "token_sequence"]

MOCK_DIM = 64


class ProviderError(Exception):
    """A provider call failed; ``retryable`` distinguishes transient faults
    from invalid input."""

    def __init__(self, message: str, *, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int
    provider_tag: str

    def __post_init__(self) -> None:
        if len(self.values) != self.dim:
            raise ValueError(f"expected {self.dim} values, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains non-finite values")

    def dot(self, other: "EmbeddingVector") -> float:
        return sum(a * b for a, b in zip(self.values, other.values))

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))

    def cosine(self, other: "EmbeddingVector") -> float:
        na, nb = self.norm(), other.norm()
        if na == 0.0 or nb == 0.0:
            return 0.0
        return self.dot(other) / (na * nb)


class EmbeddingProvider(Protocol):
    provider_tag: str
    dim: int

    def embed_texts(
        self, texts: Sequence[str], kind: EmbedKind = "document"
    ) -> list[EmbeddingVector] | list[list[EmbeddingVector]]: ...


def _check_inputs(texts: Sequence[str]) -> None:
    if not texts:
        raise ValueError("texts must be a non-empty list")
    for i, t in enumerate(texts):
        if not t:
            raise ValueError(f"texts[{i}] is empty")


class MockEmbedder:
    """Deterministic hash-based embedder: each token maps to a seeded
    pseudo-random unit vector; a text embeds as the L2-normalized sum of its
    token vectors. Token overlap therefore implies similarity, with zero
    network dependency.
    """

    def __init__(self, seed: int = 0, dim: int = MOCK_DIM):
        self.seed = seed
        self.dim = dim
        self.provider_tag = f"mock-hash-{dim}"
        self._token_cache: dict[str, tuple[float, ...]] = {}

    def _token_vector(self, token: str) -> tuple[float, ...]:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        material = hashlib.shake_256(
            f"{self.seed}|{token}".encode("utf-8")
        ).digest(self.dim * 8)
        raw = struct.unpack(f"<{self.dim}Q", material)
        # map uint64 -> [-1, 1), then normalize to the unit sphere
        vals = [u / 2**63 - 1.0 for u in raw]
        norm = math.sqrt(sum(v * v for v in vals))
        unit = tuple(v / norm for v in vals)
        self._token_cache[token] = unit
        return unit

    def _tokens(self, text: str) -> list[str]:
        from .core import tokenize

        toks = tokenize(text)
        # punctuation-only text still gets a stable non-zero vector
        return toks if toks else [text]

    def _text_vector(self, text: str) -> EmbeddingVector:
        acc = [0.0] * self.dim
        for tok in self._tokens(text):
            vec = self._token_vector(tok)
            for i, v in enumerate(vec):
                acc[i] += v
        norm = math.sqrt(sum(v * v for v in acc))
        if norm > 0.0:
            acc = [v / norm for v in acc]
        return EmbeddingVector(tuple(acc), self.dim, self.provider_tag)

    def embed_texts(
        self, texts: Sequence[str], kind: EmbedKind = "document"
    ) -> list[EmbeddingVector] | list[list[EmbeddingVector]]:
        _check_inputs(texts)
        if kind == "token_sequence":
            return [
                [
                    EmbeddingVector(self._token_vector(t), self.dim, self.provider_tag)
                    for t in self._tokens(text)
                ]
                for text in texts
            ]
        return [self._text_vector(text) for text in texts]


class HttpEmbedder:
    """Client for the JSON embedding protocol:
    POST {model, input: [...]} -> {data: [{embedding: [...]}, ...]}.

    Base URL and API key come from SOAPGEN_EMBED_URL / SOAPGEN_EMBED_KEY
    unless passed explicitly.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "text-embedding",
        dim: int = MOCK_DIM,
        batch_size: int = 64,
        retries: int = 3,
        backoff: float = 0.5,
        max_inflight: int = 4,
        cache_size: int = 0,
        timeout: float = 30.0,
    ):
        self.base_url = base_url or os.environ.get("SOAPGEN_EMBED_URL", "")
        if not self.base_url:
            raise ProviderError("embedding base URL not configured", retryable=False)
        self.api_key = api_key or os.environ.get("SOAPGEN_EMBED_KEY", "")
        self.model = model
        self.dim = dim
        self.provider_tag = f"http-{model}"
        self.batch_size = batch_size
        self.retries = retries
        self.backoff = backoff
        self._sem = threading.Semaphore(max_inflight)
        self._client = httpx.Client(timeout=timeout)
        self._cache: OrderedDict[str, EmbeddingVector] = OrderedDict()
        self._cache_size = cache_size
        self._cache_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post_batch(self, batch: Sequence[str]) -> list[EmbeddingVector]:
        payload = {"model": self.model, "input": list(batch)}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with self._sem:
                    resp = self._client.post(
                        self.base_url, json=payload, headers=self._headers()
                    )
                resp.raise_for_status()
                data = resp.json()["data"]
                return [
                    EmbeddingVector(tuple(item["embedding"]), self.dim, self.provider_tag)
                    for item in data
                ]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"embedding provider failed: {last_error}", retryable=True)

    def _cached(self, text: str) -> EmbeddingVector | None:
        with self._cache_lock:
            vec = self._cache.get(text)
            if vec is not None:
                self._cache.move_to_end(text)
            return vec

    def _remember(self, text: str, vec: EmbeddingVector) -> None:
        if self._cache_size <= 0:
            return
        with self._cache_lock:
            self._cache[text] = vec
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)

    def _embed_flat(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out: list[EmbeddingVector | None] = [self._cached(t) for t in texts]
        missing = [i for i, v in enumerate(out) if v is None]
        for start in range(0, len(missing), self.batch_size):
            idxs = missing[start : start + self.batch_size]
            vectors = self._post_batch([texts[i] for i in idxs])
            for i, vec in zip(idxs, vectors):
                out[i] = vec
                self._remember(texts[i], vec)
        return [v for v in out if v is not None]

    def embed_texts(
        self, texts: Sequence[str], kind: EmbedKind = "document"
    ) -> list[EmbeddingVector] | list[list[EmbeddingVector]]:
        _check_inputs(texts)
        if kind == "token_sequence":
            from .core import tokenize

            result: list[list[EmbeddingVector]] = []
            for text in texts:
                toks = tokenize(text) or [text]
                result.append(self._embed_flat(toks))
            return result
        return self._embed_flat(texts)


def make_embedder(config, seed: int | None = None) -> EmbeddingProvider:
    """Pick the mock or HTTP embedder per config."""
    if config.mock_providers:
        return MockEmbedder(
            seed=config.rng_seed if seed is None else seed, dim=config.embed_dim
        )
    return HttpEmbedder(
        dim=config.embed_dim,
        batch_size=config.embed_batch_size,
        retries=config.provider_retries,
        backoff=config.provider_backoff,
        max_inflight=config.max_inflight,
    )
