"""Text-generation evaluation metrics over the engine-wide tokenizer."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .core import tokenize
from .stemmer import porter_stem


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bleu(candidate: str, references: Sequence[str]) -> float:
    """Sentence-level BLEU-4 with add-one smoothing on zero counts for
    n >= 2 and the standard brevity penalty. Empty candidate scores 0."""
    if not references:
        raise ValueError("references must be non-empty")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        cand_grams = _ngrams(cand, n)
        total = sum(cand_grams.values())
        max_ref: Counter = Counter()
        for ref in refs:
            for gram, count in _ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(c, max_ref.get(g, 0)) for g, c in cand_grams.items())
        if clipped > 0:
            p = clipped / total
        elif n >= 2:
            p = 1.0 / (total + 1)
        else:
            return 0.0
        log_sum += 0.25 * math.log(p)

    c = len(cand)
    # closest reference length; ties favor the shorter
    r = min((len(ref) for ref in refs), key=lambda rl: (abs(rl - c), rl))
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * math.exp(log_sum)


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1 for n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    cand_grams = _ngrams(tokenize(candidate), n)
    ref_grams = _ngrams(tokenize(reference), n)
    cand_total = sum(cand_grams.values())
    ref_total = sum(ref_grams.values())
    if cand_total == 0 or ref_total == 0:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = sum(min(c, ref_grams.get(g, 0)) for g, c in cand_grams.items())
    precision = overlap / cand_total
    recall = overlap / ref_total
    return RougeScore(precision, recall, _f1(precision, recall))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1 over token sequences."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = _lcs_length(cand, ref)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return RougeScore(precision, recall, _f1(precision, recall))


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Two-pass unigram alignment: exact matches first, then Porter-stem
    matches over the remainder. Greedy, in order, each token used once."""
    matched_ref = [False] * len(ref)
    pairing: list[int | None] = [None] * len(cand)
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not matched_ref[j] and rtok == tok:
                matched_ref[j] = True
                pairing[i] = j
                break
    cand_stems = [porter_stem(t) for t in cand]
    ref_stems = [porter_stem(t) for t in ref]
    for i, stem in enumerate(cand_stems):
        if pairing[i] is not None:
            continue
        for j, rstem in enumerate(ref_stems):
            if not matched_ref[j] and rstem == stem:
                matched_ref[j] = True
                pairing[i] = j
                break
    return [(i, j) for i, j in enumerate(pairing) if j is not None]


def meteor(candidate: str, reference: str) -> float:
    """Unigram METEOR with exact + stemmed matching and the fragmentation
    penalty 0.5 * (chunks / matches)^3. Synonym matching is not performed."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def bertscore_f1(candidate: str, reference: str, token_embedder) -> float:
    """Greedy-matching token-similarity F1: each side's tokens matched to
    their best cosine partner on the other side, means combined harmonically.
    No IDF weighting, no baseline rescaling."""
    if not candidate.strip() or not reference.strip():
        return 0.0
    cand_vecs, ref_vecs = token_embedder.embed_texts(
        [candidate, reference], kind="token_sequence"
    )
    if not cand_vecs or not ref_vecs:
        return 0.0
    sims = [[cv.cosine(rv) for rv in ref_vecs] for cv in cand_vecs]
    precision = sum(max(row) for row in sims) / len(cand_vecs)
    recall = sum(
        max(sims[i][j] for i in range(len(cand_vecs))) for j in range(len(ref_vecs))
    ) / len(ref_vecs)
    # random-hash token vectors can go slightly negative; scores stay in [0,1]
    precision = max(0.0, precision)
    recall = max(0.0, recall)
    return _f1(precision, recall)
