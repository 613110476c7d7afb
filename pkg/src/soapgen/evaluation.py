"""Visit-split evaluation protocol and the ablation report generator."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .core import PipelineConfig, SoapNote, validate_note
from .corpus import CorpusSplit
from .embedding import EmbeddingProvider, ProviderError
from .generation import GeneratorProvider, Pipeline, StageError
from .metrics import bertscore_f1, bleu, meteor, rouge_l, rouge_n
from .retrieval import (
    STAGE_ASSESSMENT,
    STAGE_PLAN,
    ReferenceBundle,
    RerankerProvider,
    RetrievalIndex,
)

METRIC_NAMES = ("bleu", "meteor", "rouge1", "rouge2", "rouge_l", "bertscore_f1")

PLAN_TABLE_COLUMNS = (
    "planning_method",
    "model",
    "self_history",
    "instruction_tuning",
    "cross_patient",
) + METRIC_NAMES

ASSESSMENT_TABLE_COLUMNS = (
    "model",
    "self_history",
    "instruction_tuning",
    "cross_patient",
) + METRIC_NAMES

TWO_STAGE = "two_stage"
SINGLE_PASS = "single_pass"


def config_fingerprint(config: PipelineConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def score_pair(
    candidate: str, reference: str, token_embedder: EmbeddingProvider
) -> dict[str, float]:
    """All six text metrics for one candidate/reference pair."""
    return {
        "bleu": bleu(candidate, [reference]),
        "meteor": meteor(candidate, reference),
        "rouge1": rouge_n(candidate, reference, 1).f1,
        "rouge2": rouge_n(candidate, reference, 2).f1,
        "rouge_l": rouge_l(candidate, reference).f1,
        "bertscore_f1": bertscore_f1(candidate, reference, token_embedder),
    }


def aggregate_scores(per_case: Sequence[dict[str, float]]) -> dict[str, float]:
    """Unweighted arithmetic mean per metric over the cases."""
    if not per_case:
        return {}
    return {
        name: sum(scores[name] for scores in per_case) / len(per_case)
        for name in METRIC_NAMES
    }


@dataclass(frozen=True)
class MetricReport:
    per_case: tuple[dict[str, float], ...]
    aggregates: dict[str, float]
    case_count: int
    config_fingerprint: str

    @classmethod
    def from_cases(
        cls, per_case: Sequence[dict[str, float]], fingerprint: str
    ) -> MetricReport:
        return cls(
            per_case=tuple(dict(c) for c in per_case),
            aggregates=aggregate_scores(per_case),
            case_count=len(per_case),
            config_fingerprint=fingerprint,
        )


@dataclass(frozen=True)
class EvalCase:
    """One test patient: the first N-1 visits as history, visit N as the
    scored target."""

    mrn: str
    history_visits: tuple[SoapNote, ...]
    target_visit: SoapNote


@dataclass
class EvalCaseReport:
    built: int = 0
    excluded: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"built": self.built, "excluded": list(self.excluded)}


def build_eval_cases(
    split: CorpusSplit, records: Sequence, config: PipelineConfig
) -> tuple[list[EvalCase], EvalCaseReport]:
    """One case per test patient, ordered by mrn. Targets whose assessment
    or plan fails validation are excluded and reported."""
    report = EvalCaseReport()
    by_mrn = {r.mrn: r for r in records}
    cases: list[EvalCase] = []
    for mrn in sorted(split.test_mrns):
        record = by_mrn.get(mrn)
        if record is None:
            report.excluded.append({"mrn": mrn, "reason": "missing_record"})
            continue
        target = record.visits[-1]
        verdict = validate_note(target, require_assessment=True, require_plan=True)
        if not verdict:
            report.excluded.append({"mrn": mrn, "reason": verdict.reason})
            continue
        cases.append(
            EvalCase(
                mrn=mrn,
                history_visits=tuple(record.visits[:-1]),
                target_visit=target,
            )
        )
    report.built = len(cases)
    return cases, report


@dataclass(frozen=True)
class AblationConfig:
    """One row of the ablation matrix. instruction_tuning records whether
    the provider is a tuned model; it is informational only."""

    planning_method: str
    use_self_history: bool
    use_cross_patient: bool
    provider_tag: str = "mock-echo"
    instruction_tuning: bool = False
    notes: str = ""

    def __post_init__(self) -> None:
        if self.planning_method not in (TWO_STAGE, SINGLE_PASS):
            raise ValueError(f"unknown planning_method: {self.planning_method}")

    @property
    def label(self) -> str:
        return (
            f"{self.planning_method}"
            f"/hist={'on' if self.use_self_history else 'off'}"
            f"/cross={'on' if self.use_cross_patient else 'off'}"
        )


def full_ablation_matrix(provider_tag: str = "mock-echo") -> list[AblationConfig]:
    """The 8-config grid: planning method x self-history x cross-patient."""
    return [
        AblationConfig(
            planning_method=method,
            use_self_history=hist,
            use_cross_patient=cross,
            provider_tag=provider_tag,
        )
        for method, hist, cross in itertools.product(
            (SINGLE_PASS, TWO_STAGE), (False, True), (False, True)
        )
    ]


@dataclass(frozen=True)
class AblationRow:
    ablation: AblationConfig
    stage: str
    metrics: dict[str, float] | None
    case_count: int
    failure_count: int

    def to_dict(self) -> dict:
        cells: dict[str, object] = {
            "planning_method": self.ablation.planning_method,
            "model": self.ablation.provider_tag,
            "self_history": self.ablation.use_self_history,
            "instruction_tuning": self.ablation.instruction_tuning,
            "cross_patient": self.ablation.use_cross_patient,
        }
        for name in METRIC_NAMES:
            cells[name] = None if self.metrics is None else self.metrics[name]
        cells["cases"] = self.case_count
        cells["failures"] = self.failure_count
        return cells


@dataclass
class AblationReport:
    plan_rows: list[AblationRow]
    assessment_rows: list[AblationRow]
    predictions: list[dict]
    audits: list[dict]
    case_count: int
    config_fingerprint: str

    def _csv_rows(
        self, rows: Sequence[AblationRow], columns: Sequence[str]
    ) -> list[list[str]]:
        out = [list(columns)]
        for row in rows:
            cells = row.to_dict()
            rendered: list[str] = []
            for col in columns:
                value = cells[col]
                if value is None:
                    rendered.append("")
                elif isinstance(value, bool):
                    rendered.append("true" if value else "false")
                elif isinstance(value, float):
                    rendered.append(f"{value:.10f}")
                else:
                    rendered.append(str(value))
            out.append(rendered)
        return out

    def write_plan_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(self._csv_rows(self.plan_rows, PLAN_TABLE_COLUMNS))

    def write_assessment_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(
                self._csv_rows(self.assessment_rows, ASSESSMENT_TABLE_COLUMNS)
            )

    def to_dict(self) -> dict:
        return {
            "case_count": self.case_count,
            "config_fingerprint": self.config_fingerprint,
            "plan_table": [row.to_dict() for row in self.plan_rows],
            "assessment_table": [row.to_dict() for row in self.assessment_rows],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def write_predictions(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for entry in self.predictions:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _audit_entry(
    mrn: str, target_seq: int, stage: str, bundle: ReferenceBundle
) -> dict:
    return {
        "mrn": mrn,
        "target_seq": target_seq,
        "stage": stage,
        "history_ids": list(bundle.history_doc_ids),
        "cross_ids": list(bundle.cross_doc_ids),
    }


def audit_violations(audits: Sequence[dict]) -> list[str]:
    """Scan collected reference-bundle audits for temporal or same-patient
    leakage relative to each case's target visit."""
    problems: list[str] = []
    for entry in audits:
        mrn = entry["mrn"]
        target_seq = entry["target_seq"]
        target_ids = {f"{mrn}:{target_seq}:soa", f"{mrn}:{target_seq}:soap"}
        for doc_id in entry["cross_ids"]:
            if doc_id in target_ids:
                problems.append(f"target doc {doc_id} retrieved for {mrn}")
            if doc_id.split(":", 1)[0] == mrn:
                problems.append(f"same-patient doc {doc_id} in cross refs of {mrn}")
        for hist_id in entry["history_ids"]:
            seq = int(hist_id.split(":", 1)[1])
            if seq >= target_seq:
                problems.append(
                    f"history visit {hist_id} not prior to target {target_seq}"
                )
    return problems


def run_ablation(
    cases: Sequence[EvalCase],
    ablations: Sequence[AblationConfig],
    base_config: PipelineConfig,
    assessment_index: RetrievalIndex,
    plan_index: RetrievalIndex,
    gateway: EmbeddingProvider,
    reranker: RerankerProvider,
    generator: GeneratorProvider,
) -> AblationReport:
    """Generate and score every case under every ablation config. Plan rows
    cover all configs; assessment rows cover the two-stage configs. Failed
    cases are skipped and counted per row."""
    plan_rows: list[AblationRow] = []
    assessment_rows: list[AblationRow] = []
    predictions: list[dict] = []
    audits: list[dict] = []
    for ablation in ablations:
        config = replace(
            base_config,
            use_self_history=ablation.use_self_history,
            use_cross_patient=ablation.use_cross_patient,
        )
        pipeline = Pipeline(
            config, assessment_index, plan_index, gateway, reranker, generator
        )
        plan_scores: list[dict[str, float]] = []
        assessment_scores: list[dict[str, float]] = []
        failures = 0
        for case in sorted(cases, key=lambda c: c.mrn):
            target = case.target_visit
            try:
                if ablation.planning_method == TWO_STAGE:
                    result = pipeline.run_two_stage(
                        target.subjective,
                        target.objective,
                        case.mrn,
                        case.history_visits,
                        before_seq=target.visit_seq,
                    )
                    outputs = [
                        (STAGE_ASSESSMENT, result.assessment, target.assessment),
                        (STAGE_PLAN, result.plan, target.plan),
                    ]
                else:
                    stage_out = pipeline.run_single_pass(
                        target.subjective,
                        target.objective,
                        case.mrn,
                        case.history_visits,
                        before_seq=target.visit_seq,
                    )
                    outputs = [(STAGE_PLAN, stage_out, target.plan)]
            except (StageError, ProviderError, ValueError):
                failures += 1
                continue
            for stage, stage_out, reference in outputs:
                audits.append(
                    _audit_entry(case.mrn, target.visit_seq, stage, stage_out.bundle)
                )
                predictions.append(
                    {
                        "mrn": case.mrn,
                        "stage": stage,
                        "generated": stage_out.result.text,
                        "reference": reference,
                    }
                )
                scores = score_pair(stage_out.result.text, reference, gateway)
                if stage == STAGE_PLAN:
                    plan_scores.append(scores)
                else:
                    assessment_scores.append(scores)
        plan_rows.append(
            AblationRow(
                ablation=ablation,
                stage=STAGE_PLAN,
                metrics=aggregate_scores(plan_scores) or None,
                case_count=len(plan_scores),
                failure_count=failures,
            )
        )
        if ablation.planning_method == TWO_STAGE:
            assessment_rows.append(
                AblationRow(
                    ablation=ablation,
                    stage=STAGE_ASSESSMENT,
                    metrics=aggregate_scores(assessment_scores) or None,
                    case_count=len(assessment_scores),
                    failure_count=failures,
                )
            )
    return AblationReport(
        plan_rows=plan_rows,
        assessment_rows=assessment_rows,
        predictions=predictions,
        audits=audits,
        case_count=len(cases),
        config_fingerprint=config_fingerprint(base_config),
    )
