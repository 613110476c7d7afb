"""Prompt assembly and the two-stage generation flow: assessment first,
then a plan conditioned on the generated (or physician-edited) assessment."""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx

from .core import PipelineConfig, SoapNote, normalize_text
from .embedding import EmbeddingProvider, ProviderError
from .retrieval import (
    STAGE_ASSESSMENT,
    STAGE_PLAN,
    ReferenceBundle,
    RerankerProvider,
    RetrievalIndex,
    compose_key_text,
    _retrieve,
    retrieve_references,
)

SENTINEL_TEXT = "NO-REFERENCE-BASELINE"

ROLE_ASSESSMENT = (
    "You are an AI medical assistant helping a physician during an outpatient "
    "visit. Reason step by step: weigh the patient's reported symptoms against "
    "the objective findings, compare the current case with the patient's own "
    "history and the similar cases provided, and state the most likely clinical "
    "assessment. Answer with the assessment text only, in the terse style of "
    "the reference material."
)
ROLE_PLAN = (
    "You are an AI medical assistant helping a physician during an outpatient "
    "visit. Reason step by step: start from the assessment, take the patient's "
    "own history and the similar cases provided into account, and write the "
    "treatment plan for the current case. Answer with the plan text only, in "
    "the terse style of the reference material."
)


@dataclass(frozen=True)
class PromptBundle:
    """A fully assembled prompt plus the references that survived the
    context budget."""

    stage: str
    role_instruction: str
    user_prompt: str
    token_estimate: int
    history: tuple[SoapNote, ...]  # retained, most recent first
    cross_patient: tuple[tuple[SoapNote, float], ...]  # retained, rank order
    truncated: bool

    @property
    def fingerprint(self) -> str:
        payload = "\x00".join([self.stage, self.role_instruction, self.user_prompt])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @property
    def references_used(self) -> list[str]:
        kind = "soa" if self.stage == STAGE_ASSESSMENT else "soap"
        ids = [f"{n.mrn}:{n.visit_seq}" for n in self.history]
        ids += [f"{n.mrn}:{n.visit_seq}:{kind}" for n, _ in self.cross_patient]
        return ids


@dataclass(frozen=True)
class GenerationResult:
    stage: str
    text: str
    provider_tag: str
    prompt_fingerprint: str
    references_used: tuple[str, ...]
    timing: float


def _estimate_tokens(role: str, user: str) -> int:
    # rough budget proxy: one token per four characters
    return (len(role) + len(user)) // 4


def _render_visit(note: SoapNote, stage: str) -> str:
    line = f"Visit {note.visit_seq} - S: {note.subjective} O: {note.objective} A: {note.assessment}"
    if stage == STAGE_PLAN:
        line += f" P: {note.plan}"
    return line


def _render_reference(rank: int, note: SoapNote, stage: str) -> str:
    line = f"[{rank}] S: {note.subjective} O: {note.objective} A: {note.assessment}"
    if stage == STAGE_PLAN:
        line += f" P: {note.plan}"
    return line


def _render_user_prompt(
    stage: str,
    s: str,
    o: str,
    a_opt: str | None,
    history: Sequence[SoapNote],
    cross: Sequence[tuple[SoapNote, float]],
    config: PipelineConfig,
) -> str:
    parts: list[str] = []
    if config.use_self_history:
        parts.append("## Patient history (most recent first)")
        if history:
            parts.extend(_render_visit(n, stage) for n in history)
        else:
            parts.append("(none)")
        parts.append("")
    if config.use_cross_patient:
        parts.append("## Similar cases from other patients")
        if cross:
            parts.extend(
                _render_reference(i, n, stage) for i, (n, _) in enumerate(cross, 1)
            )
        else:
            parts.append("(none)")
        parts.append("")
    parts.append("## Current case")
    parts.append(f"Subjective: {s}")
    parts.append(f"Objective: {o}")
    if a_opt is not None:
        parts.append(f"Assessment: {a_opt}")
    parts.append("")
    if stage == STAGE_ASSESSMENT:
        parts.append("Write the assessment for the current case.")
        parts.append("Assessment:")
    else:
        parts.append("Write the treatment plan for the current case.")
        parts.append("Plan:")
    return "\n".join(parts)


def assemble_prompt(
    stage: str,
    s: str,
    o: str,
    a_opt: str | None,
    bundle: ReferenceBundle,
    config: PipelineConfig,
) -> PromptBundle:
    """Instantiate the prompt template for one stage. When the estimated
    token count exceeds the context budget, lowest-ranked cross-patient
    references are dropped first, then oldest history visits; the most
    recent visit is always retained."""
    role = ROLE_ASSESSMENT if stage == STAGE_ASSESSMENT else ROLE_PLAN
    history = list(bundle.self_history)
    cross = list(bundle.cross_patient)
    while True:
        user = _render_user_prompt(stage, s, o, a_opt, history, cross, config)
        estimate = _estimate_tokens(role, user)
        if estimate <= config.context_budget_tokens:
            break
        if cross:
            cross.pop()
        elif len(history) > 1:
            history.pop()
        else:
            break
    truncated = len(history) < len(bundle.self_history) or len(cross) < len(
        bundle.cross_patient
    )
    return PromptBundle(
        stage=stage,
        role_instruction=role,
        user_prompt=user,
        token_estimate=estimate,
        history=tuple(history),
        cross_patient=tuple(cross),
        truncated=truncated,
    )


class GeneratorProvider(Protocol):
    provider_tag: str

    def complete(
        self, prompt: PromptBundle, temperature: float, max_tokens: int
    ) -> str: ...


class MockGenerator:
    """Deterministic offline generator: echoes the A (or P) field of the
    top-ranked cross-patient reference, else the most recent self-history
    visit's field, else a fixed sentinel."""

    provider_tag = "mock-echo"

    def complete(
        self, prompt: PromptBundle, temperature: float = 0.0, max_tokens: int = 1024
    ) -> str:
        field = "assessment" if prompt.stage == STAGE_ASSESSMENT else "plan"
        text = ""
        if prompt.cross_patient:
            text = getattr(prompt.cross_patient[0][0], field)
        elif prompt.history:
            text = getattr(prompt.history[0], field)
        return text or SENTINEL_TEXT


class SlowMockGenerator(MockGenerator):
    """Mock with artificial latency, for non-blocking-contract tests."""

    provider_tag = "mock-echo-slow"

    def __init__(self, delay: float = 0.2):
        self.delay = delay

    def complete(
        self, prompt: PromptBundle, temperature: float = 0.0, max_tokens: int = 1024
    ) -> str:
        time.sleep(self.delay)
        return super().complete(prompt, temperature, max_tokens)


class HttpGenerator:
    """Client for the JSON completion protocol:
    POST {system, prompt, max_tokens, temperature} -> {text}.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        provider_tag: str = "http-generator",
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
    ):
        self.base_url = base_url or os.environ.get("SOAPGEN_GEN_URL", "")
        if not self.base_url:
            raise ProviderError("generator base URL not configured", retryable=False)
        self.api_key = api_key or os.environ.get("SOAPGEN_GEN_KEY", "")
        self.provider_tag = provider_tag
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout)

    def complete(
        self, prompt: PromptBundle, temperature: float = 0.0, max_tokens: int = 1024
    ) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "system": prompt.role_instruction,
            "prompt": prompt.user_prompt,
            "max_tokens": max_tokens,
            "temperature": temperature,
        }
        last_error: str = "unknown"
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.base_url, json=payload, headers=headers)
                resp.raise_for_status()
                text = resp.json()["text"]
                if text and text.strip():
                    return text
                last_error = "empty completion"
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_error = str(exc)
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"generator failed: {last_error}", retryable=True)


def generate(
    prompt: PromptBundle,
    provider: GeneratorProvider,
    temperature: float = 0.0,
    max_tokens: int = 1024,
) -> GenerationResult:
    """Run one provider call and normalize the completion."""
    start = time.perf_counter()
    text = normalize_text(provider.complete(prompt, temperature, max_tokens))
    elapsed = time.perf_counter() - start
    if not text:
        raise ProviderError("provider returned an empty completion", retryable=False)
    return GenerationResult(
        stage=prompt.stage,
        text=text,
        provider_tag=provider.provider_tag,
        prompt_fingerprint=prompt.fingerprint,
        references_used=tuple(prompt.references_used),
        timing=elapsed,
    )


def make_generator(config: PipelineConfig) -> GeneratorProvider:
    if config.mock_providers:
        return MockGenerator()
    return HttpGenerator(
        retries=config.provider_retries, backoff=config.provider_backoff
    )


@dataclass(frozen=True)
class StageOutput:
    result: GenerationResult
    bundle: ReferenceBundle
    prompt: PromptBundle


@dataclass(frozen=True)
class TwoStageResult:
    assessment: StageOutput
    plan: StageOutput


class StageError(Exception):
    """A pipeline stage failed; earlier stage results stay available."""

    def __init__(self, stage: str, cause: Exception, partial: StageOutput | None = None):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial


def _validated(name: str, value: str) -> str:
    text = normalize_text(value)
    if len(text) < 2:
        raise ValueError(f"{name}_too_short")
    return text


class Pipeline:
    """Binds the retrieval indexes and providers into the runnable flows."""

    def __init__(
        self,
        config: PipelineConfig,
        assessment_index: RetrievalIndex,
        plan_index: RetrievalIndex,
        gateway: EmbeddingProvider,
        reranker: RerankerProvider,
        generator: GeneratorProvider,
        plan_generator: GeneratorProvider | None = None,
    ):
        self.config = config
        self.assessment_index = assessment_index
        self.plan_index = plan_index
        self.gateway = gateway
        self.reranker = reranker
        self.generator = generator
        self.plan_generator = plan_generator or generator

    def _generate(self, prompt: PromptBundle, provider: GeneratorProvider) -> GenerationResult:
        return generate(
            prompt,
            provider,
            temperature=self.config.generator_temperature,
            max_tokens=self.config.generator_max_tokens,
        )

    def run_assessment(
        self,
        s: str,
        o: str,
        patient_mrn: str,
        visits: Sequence[SoapNote] = (),
        before_seq: int | None = None,
    ) -> StageOutput:
        """Stage 1 alone: retrieve against the assessment index and
        generate A from {S, O}."""
        s = _validated("subjective", s)
        o = _validated("objective", o)
        return self._assessment_stage(s, o, patient_mrn, visits, before_seq)

    def _assessment_stage(
        self, s: str, o: str, mrn: str, visits: Sequence[SoapNote],
        before_seq: int | None,
    ) -> StageOutput:
        bundle = retrieve_references(
            self.assessment_index, s, o, None, mrn, visits,
            STAGE_ASSESSMENT, self.config, self.gateway, self.reranker, before_seq,
        )
        prompt = assemble_prompt(STAGE_ASSESSMENT, s, o, None, bundle, self.config)
        try:
            result = self._generate(prompt, self.generator)
        except ProviderError as exc:
            raise StageError(STAGE_ASSESSMENT, exc) from exc
        return StageOutput(result=result, bundle=bundle, prompt=prompt)

    def _plan_stage(
        self, s: str, o: str, assessment: str, mrn: str,
        visits: Sequence[SoapNote], before_seq: int | None,
        partial: StageOutput | None = None,
    ) -> StageOutput:
        bundle = retrieve_references(
            self.plan_index, s, o, assessment, mrn, visits,
            STAGE_PLAN, self.config, self.gateway, self.reranker, before_seq,
        )
        prompt = assemble_prompt(STAGE_PLAN, s, o, assessment, bundle, self.config)
        try:
            result = self._generate(prompt, self.plan_generator)
        except ProviderError as exc:
            raise StageError(STAGE_PLAN, exc, partial=partial) from exc
        return StageOutput(result=result, bundle=bundle, prompt=prompt)

    def run_two_stage(
        self,
        s: str,
        o: str,
        patient_mrn: str,
        visits: Sequence[SoapNote] = (),
        before_seq: int | None = None,
    ) -> TwoStageResult:
        """Assessment first, then a plan retrieved and generated with the
        assessment appended to the query; the plan prompt carries the
        generated assessment verbatim."""
        s = _validated("subjective", s)
        o = _validated("objective", o)
        stage1 = self._assessment_stage(s, o, patient_mrn, visits, before_seq)
        stage2 = self._plan_stage(
            s, o, stage1.result.text, patient_mrn, visits, before_seq, partial=stage1
        )
        return TwoStageResult(assessment=stage1, plan=stage2)

    def run_single_pass(
        self,
        s: str,
        o: str,
        patient_mrn: str,
        visits: Sequence[SoapNote] = (),
        before_seq: int | None = None,
    ) -> StageOutput:
        """Baseline: plan generated directly from {S, O}, with retrieval over
        the plan-stage index keyed on the assessment-free query."""
        s = _validated("subjective", s)
        o = _validated("objective", o)
        query = compose_key_text(STAGE_ASSESSMENT, s, o)
        bundle = _retrieve(
            self.plan_index, query, patient_mrn, visits, STAGE_PLAN,
            self.config, self.gateway, self.reranker, before_seq,
        )
        prompt = assemble_prompt(STAGE_PLAN, s, o, None, bundle, self.config)
        try:
            result = self._generate(prompt, self.plan_generator)
        except ProviderError as exc:
            raise StageError(STAGE_PLAN, exc) from exc
        return StageOutput(result=result, bundle=bundle, prompt=prompt)

    def regenerate_plan(
        self,
        s: str,
        o: str,
        a_edited: str,
        patient_mrn: str,
        visits: Sequence[SoapNote] = (),
        before_seq: int | None = None,
    ) -> StageOutput:
        """Stage 2 with a physician-edited assessment, including fresh
        plan-stage retrieval keyed on the edited text."""
        s = _validated("subjective", s)
        o = _validated("objective", o)
        a = normalize_text(a_edited)
        if not a:
            raise ValueError("assessment_too_short")
        return self._plan_stage(s, o, a, patient_mrn, visits, before_seq)
