"""Domain types, text normalization, and validation shared by the whole pipeline."""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, fields, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

_WS_RE = re.compile(r"\s+")
# alphanumeric runs only: \w minus underscore, unicode-aware
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

REASON_TOO_SHORT = "{field}_too_short"
REASON_NOT_NORMALIZED = "{field}_not_normalized"

MIN_FIELD_CHARS = 2


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize_text(raw: str) -> str:
    """Collapse whitespace runs to one space and runs of an identical
    punctuation character to one occurrence, then strip.

    Mixed punctuation runs like "?!" are kept as-is. Idempotent.
    """
    text = _WS_RE.sub(" ", raw).strip()
    out: list[str] = []
    prev = ""
    for ch in text:
        if ch == prev and _is_punct(ch):
            continue
        out.append(ch)
        prev = ch
    return "".join(out)


def tokenize(text: str) -> list[str]:
    """Engine-wide tokenizer: lowercase, split on non-alphanumeric, drop
    empties. No stemming, no stop-words."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SoapNote:
    """One visit's S, O, A, P texts plus visit metadata."""

    mrn: str
    visit_date: date
    visit_seq: int
    subjective: str
    objective: str
    assessment: str
    plan: str
    department: str | None = None

    def to_dict(self) -> dict:
        d = {
            "mrn": self.mrn,
            "visit_date": self.visit_date.isoformat(),
            "visit_seq": self.visit_seq,
            "s": self.subjective,
            "o": self.objective,
            "a": self.assessment,
            "p": self.plan,
        }
        if self.department is not None:
            d["dept"] = self.department
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SoapNote":
        return cls(
            mrn=str(d["mrn"]),
            visit_date=date.fromisoformat(d["visit_date"]),
            visit_seq=int(d.get("visit_seq", 0)),
            subjective=d["s"],
            objective=d["o"],
            assessment=d.get("a", ""),
            plan=d.get("p", ""),
            department=d.get("dept"),
        )


@dataclass(frozen=True)
class Verdict:
    """Validation outcome; ``reason`` is a machine-readable code when rejected."""

    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_note(
    note: SoapNote,
    *,
    require_assessment: bool = False,
    require_plan: bool = False,
) -> Verdict:
    """Check a note against the minimum-length and normalization rules.

    Subjective and objective must always be at least ``MIN_FIELD_CHARS``
    characters; assessment and plan only when the note serves as a
    generation target or as a reference carrying those fields.
    """
    checks = [
        ("subjective", note.subjective, True),
        ("objective", note.objective, True),
        ("assessment", note.assessment, require_assessment),
        ("plan", note.plan, require_plan),
    ]
    for name, value, required in checks:
        if value != normalize_text(value):
            return Verdict(False, REASON_NOT_NORMALIZED.format(field=name))
        if required and len(value) < MIN_FIELD_CHARS:
            return Verdict(False, REASON_TOO_SHORT.format(field=name))
    return Verdict(True)


@dataclass(frozen=True)
class PatientRecord:
    """MRN-keyed, date-ordered visit sequence."""

    mrn: str
    visits: tuple[SoapNote, ...]

    def __post_init__(self) -> None:
        for i, note in enumerate(self.visits, start=1):
            if note.mrn != self.mrn:
                raise ValueError(f"visit mrn {note.mrn!r} != record mrn {self.mrn!r}")
            if note.visit_seq != i:
                raise ValueError(f"visit_seq gap: expected {i}, got {note.visit_seq}")

    @classmethod
    def from_notes(cls, mrn: str, notes: Iterable[SoapNote]) -> "PatientRecord":
        """Build a record from unordered notes: sort by visit_date (ties keep
        input order) and renumber visit_seq from 1."""
        ordered = sorted(enumerate(notes), key=lambda t: (t[1].visit_date, t[0]))
        visits = tuple(
            replace(note, mrn=mrn, visit_seq=i)
            for i, (_, note) in enumerate(ordered, start=1)
        )
        return cls(mrn=mrn, visits=visits)

    def latest(self, limit: int) -> list[SoapNote]:
        """The most recent ``limit`` visits, most recent first."""
        if limit <= 0:
            return []
        return list(reversed(self.visits[-limit:]))


@dataclass
class PipelineConfig:
    """Knobs for retrieval, generation, evaluation, and the service."""

    n_hist: int = 20
    n_ref: int = 10
    n_sim: int = 80
    fusion_alpha: float = 0.5
    rng_seed: int = 0

    # BM25 constants (Okapi defaults)
    bm25_k1: float = 1.2
    bm25_b: float = 0.75

    # context sources; disabling removes the block from prompts entirely
    use_self_history: bool = True
    use_cross_patient: bool = True

    # prompt budget, in estimated tokens (chars / 4)
    context_budget_tokens: int = 60_000

    # providers
    mock_providers: bool = True
    embed_dim: int = 64
    embed_batch_size: int = 64
    provider_retries: int = 3
    provider_backoff: float = 0.5
    max_inflight: int = 4
    generator_temperature: float = 0.0
    generator_max_tokens: int = 1024
    rerank_fallback_to_fused: bool = False

    # corpus split
    train_ratio: float = 0.8

    # service
    queue_size: int = 1024
    workers: int = 4
    task_ttl_seconds: float = 86_400.0
    strict_mrn: bool = False
    index_on_ingest: bool = False
    store_path: str = "soapgen.db"
    index_dir: str = "indexes"

    def __post_init__(self) -> None:
        if self.n_hist < 0:
            raise ValueError("n_hist must be >= 0")
        if self.n_ref < 1:
            raise ValueError("n_ref must be >= 1")
        if self.n_ref > self.n_sim:
            raise ValueError("n_ref must be <= n_sim")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise ValueError("fusion_alpha must be in [0, 1]")
        if not 0.0 < self.train_ratio < 1.0:
            raise ValueError("train_ratio must be in (0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def group_into_records(notes: Sequence[SoapNote]) -> list[PatientRecord]:
    """Group notes by mrn into PatientRecords, preserving per-mrn input order
    for date ties. Records sorted by mrn."""
    by_mrn: dict[str, list[SoapNote]] = {}
    for note in notes:
        by_mrn.setdefault(note.mrn, []).append(note)
    return [
        PatientRecord.from_notes(mrn, group) for mrn, group in sorted(by_mrn.items())
    ]
