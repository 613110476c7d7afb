"""Shared fixtures: seeded synthetic corpus, mock providers, tiny indexes."""

from __future__ import annotations

import json
import random
from datetime import date, timedelta
from pathlib import Path

import pytest

from soapgen import (
    MockEmbedder,
    MockGenerator,
    MockReranker,
    PipelineConfig,
    SoapNote,
    build_index,
)
from soapgen.retrieval import STAGE_ASSESSMENT, STAGE_PLAN

SYMPTOMS = [
    "chest pain", "shortness of breath", "dry cough", "productive cough",
    "fatigue", "dizziness", "palpitations", "ankle swelling", "headache",
    "nausea", "joint pain", "low grade fever", "back pain",
    "abdominal discomfort", "sore throat", "night sweats",
]
FINDINGS = [
    "bp 132/84", "bp 148/92", "hr 78", "hr 96", "temp 37.2", "temp 38.4",
    "spo2 97", "spo2 93", "lungs clear", "mild crackles left base",
    "regular rhythm", "no peripheral edema", "trace ankle edema",
    "ecg unremarkable", "troponin negative", "wbc mildly elevated",
    "chest xray clear",
]
CONDITIONS = [
    "stable angina", "community acquired pneumonia",
    "viral upper respiratory infection", "uncontrolled hypertension",
    "heart failure with preserved ejection fraction",
    "gastroesophageal reflux", "migraine without aura",
    "osteoarthritis flare", "anxiety related symptoms",
    "type two diabetes with suboptimal control",
]
ACTIONS = [
    "continue current medications", "start low dose ace inhibitor",
    "order chest xray", "begin short course antibiotics",
    "increase statin dose", "advise rest and fluids",
    "schedule stress test", "refer to cardiology", "titrate metformin",
    "follow up in two weeks", "order basic metabolic panel",
    "start proton pump inhibitor",
]


def make_note(mrn: str, seq: int, visit_date: date, rng: random.Random) -> SoapNote:
    """One synthetic visit. The trailing case/visit token makes every field
    text unique, so substring leakage scans are meaningful."""
    tag = f"case {mrn.lower()} visit {seq}"
    sym = rng.sample(SYMPTOMS, 2)
    obs = rng.sample(FINDINGS, 3)
    cond = rng.choice(CONDITIONS)
    acts = rng.sample(ACTIONS, 2)
    return SoapNote(
        mrn=mrn,
        visit_date=visit_date,
        visit_seq=seq,
        subjective=f"patient reports {sym[0]} and {sym[1]} {tag}",
        objective=f"{obs[0]} {obs[1]} {obs[2]} {tag}",
        assessment=f"{cond} {tag}",
        plan=f"{acts[0]} and {acts[1]} {tag}",
        department="general medicine",
    )


def make_corpus_notes(
    n_patients: int,
    seed: int = 0,
    min_visits: int = 3,
    max_visits: int = 5,
) -> list[SoapNote]:
    rng = random.Random(seed)
    notes: list[SoapNote] = []
    for p in range(n_patients):
        mrn = f"MRN{p:04d}"
        n_visits = rng.randint(min_visits, max_visits)
        day = date(2023, 1, 1) + timedelta(days=rng.randint(0, 60))
        for seq in range(1, n_visits + 1):
            notes.append(make_note(mrn, seq, day, rng))
            day += timedelta(days=rng.randint(7, 90))
    return notes


def notes_to_jsonl(notes: list[SoapNote], path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for note in notes:
            fh.write(
                json.dumps(
                    {
                        "mrn": note.mrn,
                        "visit_date": note.visit_date.isoformat(),
                        "s": note.subjective,
                        "o": note.objective,
                        "a": note.assessment,
                        "p": note.plan,
                        "dept": note.department,
                    }
                )
                + "\n"
            )


@pytest.fixture
def config() -> PipelineConfig:
    return PipelineConfig()


@pytest.fixture
def mock_embedder() -> MockEmbedder:
    return MockEmbedder(seed=0, dim=64)


@pytest.fixture
def mock_reranker() -> MockReranker:
    return MockReranker()


@pytest.fixture
def mock_generator() -> MockGenerator:
    return MockGenerator()


@pytest.fixture
def kb_notes() -> list[SoapNote]:
    return make_corpus_notes(12, seed=41)


@pytest.fixture
def stage_indexes(kb_notes, mock_embedder):
    assessment_index, _ = build_index(kb_notes, STAGE_ASSESSMENT, mock_embedder)
    plan_index, _ = build_index(kb_notes, STAGE_PLAN, mock_embedder)
    return assessment_index, plan_index


@pytest.fixture
def patient_visits() -> list[SoapNote]:
    rng = random.Random(97)
    day = date(2024, 2, 1)
    visits = []
    for seq in range(1, 5):
        visits.append(make_note("ZZZ9999", seq, day, rng))
        day += timedelta(days=30)
    return visits
