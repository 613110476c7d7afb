"""Two-step retrieval over a SOAP knowledge base: hybrid BM25 + dense
candidate generation, then cross-encoder re-ranking to the top references.

Instantiated twice per deployment: an index keyed on (S, O, A) for the
assessment stage and one keyed on (S, O, A, P) for the plan stage.
"""

from __future__ import annotations

import json
import math
import os
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable,Iterable, Protocol, Sequence

import httpx
import numpy as np

from .core import PipelineConfig, SoapNote, tokenize, validate_note
from .embedding import EmbeddingProvider, EmbeddingVector, ProviderError

INDEX_FORMAT = "soapgen-index"
INDEX_VERSION = 1

STAGE_ASSESSMENT = "assessment"
STAGE_PLAN = "plan"
_STAGE_KIND = {STAGE_ASSESSMENT: "soa", STAGE_PLAN: "soap"}


class IndexBuildError(Exception):
    """Index construction aborted; carries partial progress."""

    def __init__(self, message: str, embedded: int, total: int):
        super().__init__(message)
        self.embedded = embedded
        self.total = total


def compose_key_text(stage: str, s: str, o: str, a: str | None = None) -> str:
    """Serialize retrieval keys and queries. The plan-stage form extends the
    assessment-stage form by exactly the appended A section."""
    base = f"S: {s} O: {o}"
    if stage == STAGE_PLAN:
        return f"{base} A: {a}"
    return base


def note_doc_id(note: SoapNote, stage: str) -> str:
    return f"{note.mrn}:{note.visit_seq}:{_STAGE_KIND[stage]}"


@dataclass(frozen=True)
class IndexedDocument:
    doc_id: str
    key_text: str
    payload: SoapNote
    embedding: EmbeddingVector


@dataclass(frozen=True)
class RetrievalCandidate:
    doc_id: str
    bm25_score: float
    dense_score: float
    fused_score: float | None = None
    rerank_score: float | None = None


@dataclass(frozen=True)
class ReferenceBundle:
    """Resolved context for one generation call."""

    stage: str
    query_text: str
    self_history: tuple[SoapNote, ...]  # most recent first
    cross_patient: tuple[tuple[SoapNote, float], ...]  # descending score
    rerank_fallback: bool = False

    @property
    def history_doc_ids(self) -> list[str]:
        return [f"{n.mrn}:{n.visit_seq}" for n in self.self_history]

    @property
    def cross_doc_ids(self) -> list[str]:
        return [note_doc_id(n, self.stage) for n, _ in self.cross_patient]

    def all_doc_ids(self) -> list[str]:
        return self.history_doc_ids + self.cross_doc_ids


class RerankerProvider(Protocol):
    provider_tag: str

    def score(self, query: str, documents: Sequence[str]) -> list[float]: ...


class MockReranker:
    """Deterministic offline re-ranker: token-overlap F1 between the query
    and each document."""

    provider_tag = "mock-overlap-f1"

    def score(self, query: str, documents: Sequence[str]) -> list[float]:
        q = Counter(tokenize(query))
        q_total = sum(q.values())
        scores = []
        for doc in documents:
            d = Counter(tokenize(doc))
            d_total = sum(d.values())
            if q_total == 0 or d_total == 0:
                scores.append(0.0)
                continue
            overlap = sum(min(c, d[g]) for g, c in q.items())
            p = overlap / d_total
            r = overlap / q_total
            scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
        return scores


class HttpReranker:
    """Client for the JSON re-rank protocol:
    POST {query, documents: [...], top_k} -> {results: [{index, relevance_score}]}.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
    ):
        self.base_url = base_url or os.environ.get("SOAPGEN_RERANK_URL", "")
        if not self.base_url:
            raise ProviderError("reranker base URL not configured", retryable=False)
        self.api_key = api_key or os.environ.get("SOAPGEN_RERANK_KEY", "")
        self.provider_tag = "http-reranker"
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout)

    def score(self, query: str, documents: Sequence[str]) -> list[float]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"query": query, "documents": list(documents), "top_k": len(documents)}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.base_url, json=payload, headers=headers)
                resp.raise_for_status()
                results = resp.json()["results"]
                scores = [0.0] * len(documents)
                for item in results:
                    scores[int(item["index"])] = float(item["relevance_score"])
                return scores
            except (httpx.HTTPError, KeyError, ValueError, IndexError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"reranker failed: {last_error}", retryable=True)


class RetrievalIndex:
    """Immutable inverted index + exact dense store over one stage's keys."""

    def __init__(
        self,
        stage: str,
        documents: list[IndexedDocument],
        k1: float = 1.2,
        b: float = 0.75,
    ):
        if stage not in _STAGE_KIND:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage = stage
        self.k1 = k1
        self.b = b
        self.documents: dict[str, IndexedDocument] = {}
        for doc in documents:
            if doc.doc_id in self.documents:
                raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
            self.documents[doc.doc_id] = doc
        self.doc_ids = sorted(self.documents)
        self.n_docs = len(self.doc_ids)
        self.postings: dict[str, dict[str, int]] = defaultdict(dict)
        self.doc_len: dict[str, int] = {}
        for doc_id in self.doc_ids:
            tokens = tokenize(self.documents[doc_id].key_text)
            self.doc_len[doc_id] = len(tokens)
            for token, tf in Counter(tokens).items():
                self.postings[token][doc_id] = tf
        self.postings = dict(self.postings)
        self._row = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}
        total_len = sum(self.doc_len.values())
        self.avgdl = total_len / self.n_docs if self.n_docs else 0.0
        if self.n_docs:
            self.dim = self.documents[self.doc_ids[0]].embedding.dim
            matrix = np.array(
                [self.documents[d].embedding.values for d in self.doc_ids],
                dtype=np.float64,
            )
            norms = np.linalg.norm(matrix, axis=1)
            norms[norms == 0.0] = 1.0
            self._unit_matrix = matrix / norms[:, None]
        else:
            self.dim = 0
            self._unit_matrix = np.zeros((0, 0), dtype=np.float64)

    # -- lexical ---------------------------------------------------------

    def _idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def bm25_score(self, query: str, doc_id: str) -> float:
        """Okapi BM25 of one document for the query token multiset."""
        if doc_id not in self.documents:
            raise KeyError(doc_id)
        score = 0.0
        dl = self.doc_len[doc_id]
        for term in tokenize(query):
            tf = self.postings.get(term, {}).get(doc_id, 0)
            if tf == 0:
                continue
            idf = self._idf(term)
            denom = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
            score += idf * tf * (self.k1 + 1.0) / denom
        return score

    def bm25_top(
        self, query: str, k: int, allowed: Callable[[str], bool] | None = None
    ) -> list[tuple[str, float]]:
        """Top-k by BM25 over every indexed document (unmatched documents
        score 0), ties broken by ascending doc_id."""
        if k <= 0 or self.n_docs == 0:
            return []
        accumulated: dict[str, float] = defaultdict(float)
        for term in tokenize(query):
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self._idf(term)
            for doc_id, tf in postings.items():
                denom = tf + self.k1 * (
                    1.0 - self.b + self.b * self.doc_len[doc_id] / self.avgdl
                )
                accumulated[doc_id] += idf * tf * (self.k1 + 1.0) / denom
        pool = self.doc_ids if allowed is None else [d for d in self.doc_ids if allowed(d)]
        ranked = sorted(pool, key=lambda d: (-accumulated.get(d, 0.0), d))
        return [(d, accumulated.get(d, 0.0)) for d in ranked[:k]]

    # -- dense -----------------------------------------------------------

    def dense_search(
        self,
        query_vec: EmbeddingVector,
        k: int,
        allowed: Callable[[str], bool] | None = None,
    ) -> list[tuple[str, float]]:
        """Exact top-k by cosine, ties broken by ascending doc_id. k may
        exceed the corpus size."""
        if self.n_docs == 0 or k <= 0:
            return []
        if query_vec.dim != self.dim:
            raise ValueError(f"query dim {query_vec.dim} != index dim {self.dim}")
        q = np.asarray(query_vec.values, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0.0:
            cosines = np.zeros(self.n_docs)
        else:
            cosines = self._unit_matrix @ (q / qn)
        pairs = [
            (doc_id, float(cosines[i]))
            for i, doc_id in enumerate(self.doc_ids)
            if allowed is None or allowed(doc_id)
        ]
        pairs.sort(key=lambda t: (-t[1], t[0]))
        return pairs[:k]

    def cosine(self, query_vec: EmbeddingVector, doc_id: str) -> float:
        i = self._row[doc_id]
        q = np.asarray(query_vec.values, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0.0:
            return 0.0
        return float(self._unit_matrix[i] @ (q / qn))

    # -- persistence -----------------------------------------------------

    def save(self, directory: str | Path) -> None:
        """Write the postings, document store, and vector files with a
        versioned header; load() round-trips to identical query results."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "stage": self.stage,
            "n_docs": self.n_docs,
            "dim": self.dim,
            "k1": self.k1,
            "b": self.b,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2))
        with open(directory / "documents.jsonl", "w", encoding="utf-8") as fh:
            for doc_id in self.doc_ids:
                doc = self.documents[doc_id]
                fh.write(
                    json.dumps(
                        {
                            "doc_id": doc.doc_id,
                            "key_text": doc.key_text,
                            "note": doc.payload.to_dict(),
                            "provider_tag": doc.embedding.provider_tag,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        vectors = np.array(
            [self.documents[d].embedding.values for d in self.doc_ids],
            dtype=np.float64,
        ).reshape(self.n_docs, self.dim if self.n_docs else 0)
        np.save(directory / "vectors.npy", vectors)

    @classmethod
    def load(cls, directory: str | Path) -> "RetrievalIndex":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        if meta.get("format") != INDEX_FORMAT or meta.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index format in {directory}")
        vectors = np.load(directory / "vectors.npy")
        documents: list[IndexedDocument] = []
        with open(directory / "documents.jsonl", "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                rec = json.loads(line)
                documents.append(
                    IndexedDocument(
                        doc_id=rec["doc_id"],
                        key_text=rec["key_text"],
                        payload=SoapNote.from_dict(rec["note"]),
                        embedding=EmbeddingVector(
                            tuple(float(v) for v in vectors[i]),
                            int(meta["dim"]),
                            rec["provider_tag"],
                        ),
                    )
                )
        return cls(meta["stage"], documents, k1=meta["k1"], b=meta["b"])


@dataclass(frozen=True)
class BuildReport:
    indexed: int
    skipped: dict[str, int]


def build_index(
    notes: Iterable[SoapNote],
    stage: str,
    gateway: EmbeddingProvider,
    k1: float = 1.2,
    b: float = 0.75,
) -> tuple[RetrievalIndex, BuildReport]:
    """Index eligible notes for one stage. Notes whose reference fields fail
    validation are skipped and counted; embedding failures abort the build."""
    eligible: list[SoapNote] = []
    skipped: dict[str, int] = {}
    for note in notes:
        verdict = validate_note(
            note,
            require_assessment=True,
            require_plan=(stage == STAGE_PLAN),
        )
        if verdict.ok:
            eligible.append(note)
        else:
            skipped[verdict.reason or "invalid"] = (
                skipped.get(verdict.reason or "invalid", 0) + 1
            )
    key_texts = [
        compose_key_text(stage, n.subjective, n.objective, n.assessment)
        for n in eligible
    ]
    embeddings: list[EmbeddingVector] = []
    if key_texts:
        try:
            embeddings = gateway.embed_texts(key_texts, kind="document")  # type: ignore[assignment]
        except ProviderError as exc:
            raise IndexBuildError(
                f"embedding provider failed during build: {exc}",
                embedded=0,
                total=len(key_texts),
            ) from exc
    documents = [
        IndexedDocument(
            doc_id=note_doc_id(note, stage),
            key_text=key,
            payload=note,
            embedding=emb,
        )
        for note, key, emb in zip(eligible, key_texts, embeddings)
    ]
    index = RetrievalIndex(stage, documents, k1=k1, b=b)
    return index, BuildReport(indexed=len(documents), skipped=skipped)


def _min_max_normalize(values: dict[str, float]) -> dict[str, float]:
    if not values:
        return {}
    lo, hi = min(values.values()), max(values.values())
    if hi == lo:
        return {k: 0.5 for k in values}
    return {k: (v - lo) / (hi - lo) for k, v in values.items()}


def hybrid_candidates(
    index: RetrievalIndex,
    query_text: str,
    gateway: EmbeddingProvider,
    config: PipelineConfig,
    exclude_mrn: str | None = None,
) -> list[RetrievalCandidate]:
    """Union of the BM25 and dense top-n_sim lists, min-max normalized per
    score family and fused convexly by fusion_alpha. Same-mrn documents are
    excluded before fusion so the pool is never starved by self-hits."""
    if index.n_docs == 0:
        return []
    allowed = None
    if exclude_mrn is not None:
        allowed = lambda d: index.documents[d].payload.mrn != exclude_mrn  # noqa: E731
    qvec = gateway.embed_texts([query_text], kind="query")[0]
    bm25_list = index.bm25_top(query_text, config.n_sim, allowed)
    dense_list = index.dense_search(qvec, config.n_sim, allowed)
    bm25_scores = dict(bm25_list)
    dense_scores = dict(dense_list)
    union = sorted(set(bm25_scores) | set(dense_scores))
    for doc_id in union:
        if doc_id not in bm25_scores:
            bm25_scores[doc_id] = index.bm25_score(query_text, doc_id)
        if doc_id not in dense_scores:
            dense_scores[doc_id] = index.cosine(qvec, doc_id)
    bm25_norm = _min_max_normalize({d: bm25_scores[d] for d in union})
    dense_norm = _min_max_normalize({d: dense_scores[d] for d in union})
    alpha = config.fusion_alpha
    fused = {
        d: alpha * dense_norm[d] + (1.0 - alpha) * bm25_norm[d] for d in union
    }
    ranked = sorted(union, key=lambda d: (-fused[d], d))[: config.n_sim]
    return [
        RetrievalCandidate(
            doc_id=d,
            bm25_score=bm25_scores[d],
            dense_score=dense_scores[d],
            fused_score=fused[d],
        )
        for d in ranked
    ]


def rerank(
    query_text: str,
    candidates: Sequence[RetrievalCandidate],
    index: RetrievalIndex,
    reranker: RerankerProvider,
    n_ref: int,
) -> list[RetrievalCandidate]:
    """Score every candidate jointly with the query and keep the top n_ref,
    descending score, ties by ascending doc_id. Empty input passes through
    without a provider call."""
    if not candidates:
        return []
    documents = [index.documents[c.doc_id].key_text for c in candidates]
    scores = reranker.score(query_text, documents)
    rescored = [
        replace(c, rerank_score=float(s)) for c, s in zip(candidates, scores)
    ]
    rescored.sort(key=lambda c: (-(c.rerank_score or 0.0), c.doc_id))
    return rescored[:n_ref]


def select_history(
    visits: Sequence[SoapNote], n_hist: int, before_seq: int | None = None
) -> tuple[SoapNote, ...]:
    """Latest min(n_hist, available) visits strictly preceding the current
    one, most recent first."""
    prior = [v for v in visits if before_seq is None or v.visit_seq < before_seq]
    prior.sort(key=lambda v: v.visit_seq)
    if n_hist <= 0:
        return ()
    return tuple(reversed(prior[-n_hist:]))


def retrieve_references(
    index: RetrievalIndex,
    s: str,
    o: str,
    a_gen: str | None,
    patient_mrn: str,
    patient_visits: Sequence[SoapNote],
    stage: str,
    config: PipelineConfig,
    gateway: EmbeddingProvider,
    reranker: RerankerProvider,
    before_seq: int | None = None,
) -> ReferenceBundle:
    """Resolve self-history plus re-ranked cross-patient references for one
    generation call. The assessment stage queries with {S, O}; the plan
    stage with {S, O, A_gen}."""
    if stage == STAGE_PLAN and a_gen is None:
        raise ValueError("plan-stage retrieval requires the generated assessment")
    if stage == STAGE_ASSESSMENT and a_gen is not None:
        raise ValueError("assessment-stage retrieval must not receive an assessment")
    query_text = compose_key_text(stage, s, o, a_gen)
    return _retrieve(
        index, query_text, patient_mrn, patient_visits, stage, config,
        gateway, reranker, before_seq,
    )


def _retrieve(
    index: RetrievalIndex,
    query_text: str,
    patient_mrn: str,
    patient_visits: Sequence[SoapNote],
    stage: str,
    config: PipelineConfig,
    gateway: EmbeddingProvider,
    reranker: RerankerProvider,
    before_seq: int | None = None,
) -> ReferenceBundle:
    history: tuple[SoapNote, ...] = ()
    if config.use_self_history:
        history = select_history(patient_visits, config.n_hist, before_seq)
    cross: tuple[tuple[SoapNote, float], ...] = ()
    fallback = False
    if config.use_cross_patient:
        candidates = hybrid_candidates(
            index, query_text, gateway, config, exclude_mrn=patient_mrn
        )
        try:
            top = rerank(query_text, candidates, index, reranker, config.n_ref)
            cross = tuple(
                (index.documents[c.doc_id].payload, float(c.rerank_score or 0.0))
                for c in top
            )
        except ProviderError:
            if not config.rerank_fallback_to_fused:
                raise
            fallback = True
            cross = tuple(
                (index.documents[c.doc_id].payload, float(c.fused_score or 0.0))
                for c in candidates[: config.n_ref]
            )
    return ReferenceBundle(
        stage=stage,
        query_text=query_text,
        self_history=history,
        cross_patient=cross,
        rerank_fallback=fallback,
    )


def make_reranker(config: PipelineConfig) -> RerankerProvider:
    if config.mock_providers:
        return MockReranker()
    return HttpReranker(
        retries=config.provider_retries, backoff=config.provider_backoff
    )
