"""Corpus loading, the patient-centric knowledge-base/train/test split, and
instruction-tuning pair export."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

from .core import PatientRecord, PipelineConfig, SoapNote, normalize_text, validate_note
from .embedding import EmbeddingProvider
from .generation import assemble_prompt
from .retrieval import (
    STAGE_ASSESSMENT,
    STAGE_PLAN,
    RerankerProvider,
    RetrievalIndex,
    retrieve_references,
)

MIN_VISITS = 3

_REQUIRED_KEYS = ("mrn", "visit_date", "s", "o", "a", "p")


class CorpusFormatError(Exception):
    """Unreadable or structurally invalid corpus input."""


class SplitError(Exception):
    """Not enough eligible patients for the requested split."""


@dataclass
class LoadReport:
    read: int = 0
    loaded: int = 0
    duplicates: int = 0
    dropped: dict[str, int] = field(default_factory=dict)
    malformed_lines: list[int] = field(default_factory=list)

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1

    def to_dict(self) -> dict:
        return {
            "read": self.read,
            "loaded": self.loaded,
            "duplicates": self.duplicates,
            "dropped": dict(sorted(self.dropped.items())),
            "malformed_lines": list(self.malformed_lines),
        }


def _parse_line(raw: str, line_no: int) -> SoapNote:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {line_no}: expected an object")
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise CorpusFormatError(f"line {line_no}: missing field {key!r}")
        if not isinstance(obj[key], str):
            raise CorpusFormatError(f"line {line_no}: field {key!r} must be a string")
    try:
        visit_date = date.fromisoformat(obj["visit_date"])
    except ValueError as exc:
        raise CorpusFormatError(f"line {line_no}: bad visit_date") from exc
    mrn = obj["mrn"].strip()
    if not mrn:
        raise CorpusFormatError(f"line {line_no}: empty mrn")
    return SoapNote(
        mrn=mrn,
        visit_date=visit_date,
        visit_seq=0,
        subjective=normalize_text(obj["s"]),
        objective=normalize_text(obj["o"]),
        assessment=normalize_text(obj["a"]),
        plan=normalize_text(obj["p"]),
        department=normalize_text(obj["dept"]) if obj.get("dept") else None,
    )


def load_corpus(
    path: str | Path, format: str = "jsonl", strict: bool = False
) -> tuple[list[PatientRecord], LoadReport]:
    """Read a JSONL corpus into per-patient records. Every note is
    normalized; notes failing validation are dropped and counted. Lenient
    mode skips malformed lines (recording line numbers); strict mode aborts
    on the first one."""
    if format != "jsonl":
        raise CorpusFormatError(f"unsupported corpus format: {format}")
    source = Path(path)
    if not source.is_file():
        raise CorpusFormatError(f"corpus file not found: {source}")
    report = LoadReport()
    kept: list[SoapNote] = []
    seen: set[tuple] = set()
    with source.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            report.read += 1
            try:
                note = _parse_line(raw, line_no)
            except CorpusFormatError:
                if strict:
                    raise
                report.malformed_lines.append(line_no)
                continue
            verdict = validate_note(note)
            if not verdict:
                report.drop(verdict.reason)
                continue
            key = (
                note.mrn,
                note.visit_date.isoformat(),
                note.subjective,
                note.objective,
                note.assessment,
                note.plan,
                note.department,
            )
            if key in seen:
                report.duplicates += 1
                continue
            seen.add(key)
            kept.append(note)
    report.loaded = len(kept)
    by_mrn: dict[str, list[SoapNote]] = {}
    for note in kept:
        by_mrn.setdefault(note.mrn, []).append(note)
    records = [
        PatientRecord.from_notes(mrn, by_mrn[mrn]) for mrn in sorted(by_mrn)
    ]
    return records, report


@dataclass(frozen=True)
class CorpusSplit:
    """Disjoint patient populations: retrieval knowledge base, tuning
    train set, and evaluation test set."""

    kb_mrns: frozenset[str]
    train_mrns: frozenset[str]
    test_mrns: frozenset[str]
    seed: int

    def __post_init__(self) -> None:
        if (
            self.kb_mrns & self.train_mrns
            or self.kb_mrns & self.test_mrns
            or self.train_mrns & self.test_mrns
        ):
            raise ValueError("split populations must be pairwise disjoint")

    def to_dict(self) -> dict:
        return {
            "kb_mrns": sorted(self.kb_mrns),
            "train_mrns": sorted(self.train_mrns),
            "test_mrns": sorted(self.test_mrns),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CorpusSplit:
        return cls(
            kb_mrns=frozenset(data["kb_mrns"]),
            train_mrns=frozenset(data["train_mrns"]),
            test_mrns=frozenset(data["test_mrns"]),
            seed=int(data["seed"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> CorpusSplit:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def eligible_mrns(records: Iterable[PatientRecord]) -> list[str]:
    """Patients with at least MIN_VISITS visits, sorted by mrn."""
    return sorted(r.mrn for r in records if len(r.visits) >= MIN_VISITS)


def split_corpus(
    records: Sequence[PatientRecord],
    kb_count: int,
    eval_count: int,
    seed: int,
    train_ratio: float = 0.8,
) -> CorpusSplit:
    """Shuffle eligible patients with a seeded RNG, take the first kb_count
    for the knowledge base, and divide the next eval_count into train/test
    by train_ratio. Same seed, same split."""
    if kb_count < 0 or eval_count < 0:
        raise ValueError("split counts must be non-negative")
    if not 0.0 <= train_ratio <= 1.0:
        raise ValueError("train_ratio must be within [0, 1]")
    pool = eligible_mrns(records)
    if len(pool) < kb_count + eval_count:
        raise SplitError(
            f"insufficient eligible patients: have {len(pool)}, "
            f"need {kb_count + eval_count}"
        )
    rng = random.Random(seed)
    rng.shuffle(pool)
    kb = pool[:kb_count]
    evaluation = pool[kb_count : kb_count + eval_count]
    train_n = round(eval_count * train_ratio)
    return CorpusSplit(
        kb_mrns=frozenset(kb),
        train_mrns=frozenset(evaluation[:train_n]),
        test_mrns=frozenset(evaluation[train_n:]),
        seed=seed,
    )


@dataclass(frozen=True)
class TuningPair:
    """One instruction-tuning example: the assembled stage prompt as input,
    the ground-truth section text as target."""

    stage: str
    input_payload: str
    target: str
    mrn: str
    target_visit_seq: int

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "input": self.input_payload,
            "target": self.target,
            "mrn": self.mrn,
            "visit_seq": self.target_visit_seq,
        }


@dataclass
class ExportReport:
    exported: int = 0
    skipped: list[dict] = field(default_factory=list)

    def skip(self, mrn: str, reason: str) -> None:
        self.skipped.append({"mrn": mrn, "reason": reason})

    def to_dict(self) -> dict:
        return {"exported": self.exported, "skipped": list(self.skipped)}


def export_tuning_pairs(
    split: CorpusSplit,
    records: Sequence[PatientRecord],
    config: PipelineConfig,
    stage: str,
    index: RetrievalIndex,
    gateway: EmbeddingProvider,
    reranker: RerankerProvider,
) -> tuple[list[TuningPair], ExportReport]:
    """For each train patient with N visits, build the stage prompt exactly
    as live inference would — history is visits 1..N-2, cross-patient
    references come from the knowledge-base index — and pair it with the
    ground-truth section of visit N-1. Plan-stage inputs carry the
    ground-truth assessment of the target visit (teacher forcing)."""
    if stage not in (STAGE_ASSESSMENT, STAGE_PLAN):
        raise ValueError(f"unknown stage: {stage}")
    report = ExportReport()
    pairs: list[TuningPair] = []
    by_mrn = {r.mrn: r for r in records}
    for mrn in sorted(split.train_mrns):
        record = by_mrn.get(mrn)
        if record is None:
            report.skip(mrn, "missing_record")
            continue
        if len(record.visits) < MIN_VISITS:
            report.skip(mrn, "too_few_visits")
            continue
        target = record.visits[-2]
        a_opt = target.assessment if stage == STAGE_PLAN else None
        field_name = "assessment" if stage == STAGE_ASSESSMENT else "plan"
        target_text = getattr(target, field_name)
        verdict = validate_note(
            target,
            require_assessment=True,
            require_plan=stage == STAGE_PLAN,
        )
        if not verdict:
            report.skip(mrn, verdict.reason)
            continue
        bundle = retrieve_references(
            index,
            target.subjective,
            target.objective,
            a_opt,
            mrn,
            record.visits,
            stage,
            config,
            gateway,
            reranker,
            before_seq=target.visit_seq,
        )
        prompt = assemble_prompt(
            stage, target.subjective, target.objective, a_opt, bundle, config
        )
        payload = prompt.role_instruction + "\n\n" + prompt.user_prompt
        pairs.append(
            TuningPair(
                stage=stage,
                input_payload=payload,
                target=target_text,
                mrn=mrn,
                target_visit_seq=target.visit_seq,
            )
        )
    report.exported = len(pairs)
    pairs.sort(key=lambda p: (p.mrn, p.target_visit_seq))
    return pairs, report


def write_tuning_pairs(pairs: Sequence[TuningPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_dict(), sort_keys=True) + "\n")
