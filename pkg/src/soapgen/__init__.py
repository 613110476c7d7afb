"""Two-stage SOAP note completion: retrieval-augmented assessment
generation followed by plan generation conditioned on the assessment."""

from .core import (
    PatientRecord,
    PipelineConfig,
    SoapNote,
    Verdict,
    group_into_records,
    normalize_text,
    tokenize,
    validate_note,
)
from .corpus import (
    CorpusFormatError,
    CorpusSplit,
    LoadReport,
    SplitError,
    TuningPair,
    export_tuning_pairs,
    load_corpus,
    split_corpus,
    write_tuning_pairs,
)
from .embedding import (
    EmbeddingVector,
    HttpEmbedder,
    MockEmbedder,
    ProviderError,
    make_embedder,
)
from .evaluation import (
    AblationConfig,
    AblationReport,
    EvalCase,
    MetricReport,
    build_eval_cases,
    full_ablation_matrix,
    run_ablation,
    score_pair,
)
from .generation import (
    ROLE_ASSESSMENT,
    ROLE_PLAN,
    SENTINEL_TEXT,
    GenerationResult,
    HttpGenerator,
    MockGenerator,
    Pipeline,
    PromptBundle,
    SlowMockGenerator,
    StageError,
    StageOutput,
    TwoStageResult,
    assemble_prompt,
    generate,
    make_generator,
)
from .metrics import bertscore_f1, bleu, meteor, rouge_l, rouge_n
from .retrieval import (
    STAGE_ASSESSMENT,
    STAGE_PLAN,
    HttpReranker,
    IndexBuildError,
    IndexedDocument,
    MockReranker,
    ReferenceBundle,
    RetrievalCandidate,
    RetrievalIndex,
    build_index,
    compose_key_text,
    hybrid_candidates,
    make_reranker,
    note_doc_id,
    rerank,
    retrieve_references,
    select_history,
)
from .service import Store, create_app
from .stemmer import porter_stem

__version__ = "1.0.0"

__all__ = [
    "AblationConfig",
    "AblationReport",
    "CorpusFormatError",
    "CorpusSplit",
    "EmbeddingVector",
    "EvalCase",
    "GenerationResult",
    "HttpEmbedder",
    "HttpGenerator",
    "HttpReranker",
    "IndexBuildError",
    "IndexedDocument",
    "LoadReport",
    "MetricReport",
    "MockEmbedder",
    "MockGenerator",
    "MockReranker",
    "PatientRecord",
    "Pipeline",
    "PipelineConfig",
    "PromptBundle",
    "ProviderError",
    "ROLE_ASSESSMENT",
    "ROLE_PLAN",
    "ReferenceBundle",
    "RetrievalCandidate",
    "RetrievalIndex",
    "SENTINEL_TEXT",
    "STAGE_ASSESSMENT",
    "STAGE_PLAN",
    "SlowMockGenerator",
    "SoapNote",
    "SplitError",
    "StageError",
    "StageOutput",
    "Store",
    "TuningPair",
    "TwoStageResult",
    "Verdict",
    "assemble_prompt",
    "bertscore_f1",
    "bleu",
    "build_eval_cases",
    "build_index",
    "compose_key_text",
    "create_app",
    "export_tuning_pairs",
    "full_ablation_matrix",
    "generate",
    "group_into_records",
    "hybrid_candidates",
    "load_corpus",
    "make_embedder",
    "make_generator",
    "make_reranker",
    "meteor",
    "normalize_text",
    "note_doc_id",
    "porter_stem",
    "rerank",
    "retrieve_references",
    "rouge_l",
    "rouge_n",
    "run_ablation",
    "score_pair",
    "select_history",
    "split_corpus",
    "tokenize",
    "validate_note",
    "write_tuning_pairs",
]
