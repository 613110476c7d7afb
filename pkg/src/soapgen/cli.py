"""Operator command line: ingest, split, index, export-tuning, generate,
eval, serve. Exit codes: 0 ok, 1 usage, 2 data error, 3 provider error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .core import PipelineConfig
from .corpus import (
    CorpusFormatError,
    CorpusSplit,
    SplitError,
    export_tuning_pairs,
    load_corpus,
    split_corpus,
    write_tuning_pairs,
)
from .embedding import ProviderError, make_embedder
from .evaluation import (
    AblationConfig,
    build_eval_cases,
    full_ablation_matrix,
    run_ablation,
)
from .generation import Pipeline, StageError, make_generator
from .retrieval import (
    STAGE_ASSESSMENT,
    STAGE_PLAN,
    IndexBuildError,
    RetrievalIndex,
    build_index,
    make_reranker,
)
from .service import Store, _stage_view, create_app


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: ANN201 - argparse signature
        raise UsageError(message)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--seed", type=int, help="override the configured RNG seed")
    parser.add_argument(
        "--json", action="store_true", help="machine-readable output on stdout"
    )
    parser.add_argument(
        "--force", action="store_true", help="allow overwriting existing outputs"
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="soapgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a JSONL corpus into a note store")
    _common_flags(p)
    p.add_argument("--corpus", required=True, help="corpus JSONL path")
    p.add_argument("--store", help="note store path (default from config)")
    p.add_argument(
        "--strict", action="store_true", help="abort on the first malformed line"
    )
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="split patients into kb/train/test")
    _common_flags(p)
    p.add_argument("--store", help="note store path")
    p.add_argument("--kb-count", type=int, required=True)
    p.add_argument("--eval-count", type=int, required=True)
    p.add_argument("--train-ratio", type=float, help="default from config")
    p.add_argument("--out", default="split.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("index", help="build both stage indexes from the kb")
    _common_flags(p)
    p.add_argument("--store", help="note store path")
    p.add_argument("--split", required=True, help="split JSON path")
    p.add_argument("--out-dir", help="index directory (default from config)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("export-tuning", help="export instruction-tuning pairs")
    _common_flags(p)
    p.add_argument("--store", help="note store path")
    p.add_argument("--split", required=True)
    p.add_argument("--index-dir", help="index directory (default from config)")
    p.add_argument(
        "--stage", choices=(STAGE_ASSESSMENT, STAGE_PLAN, "both"), default="both"
    )
    p.add_argument("--out", default="tuning_pairs.jsonl")
    p.set_defaults(func=cmd_export_tuning)

    p = sub.add_parser("generate", help="run the pipeline for one case")
    _common_flags(p)
    p.add_argument("--store", help="note store path")
    p.add_argument("--index-dir", help="index directory (default from config)")
    p.add_argument("--mrn", required=True)
    p.add_argument("--subjective", required=True)
    p.add_argument("--objective", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--two-stage", dest="two_stage", action="store_true", default=True)
    mode.add_argument("--single-pass", dest="two_stage", action="store_false")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="run the ablation evaluation")
    _common_flags(p)
    p.add_argument("--store", help="note store path")
    p.add_argument("--split", required=True)
    p.add_argument("--index-dir", help="index directory (default from config)")
    p.add_argument("--out-dir", default="reports")
    p.add_argument(
        "--ablation", help="JSON file with ablation configs (default: full matrix)"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP service")
    _common_flags(p)
    p.add_argument("--store", help="note store path")
    p.add_argument("--index-dir", help="index directory (optional)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            config = PipelineConfig.from_file(path)
        except (ValueError, OSError) as exc:
            raise DataError(f"bad config file {path}: {exc}")
    else:
        config = PipelineConfig()
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)
    return config


def _guard_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise DataError(f"output exists, pass --force to overwrite: {path}")


def _store_path(args: argparse.Namespace, config: PipelineConfig) -> Path:
    return Path(args.store) if args.store else Path(config.store_path)


def _open_store(args: argparse.Namespace, config: PipelineConfig) -> Store:
    path = _store_path(args, config)
    if not path.is_file():
        raise DataError(f"note store not found: {path}")
    return Store(path)


def _index_dir(args: argparse.Namespace, config: PipelineConfig) -> Path:
    return Path(args.index_dir) if args.index_dir else Path(config.index_dir)


def _load_indexes(
    args: argparse.Namespace, config: PipelineConfig
) -> tuple[RetrievalIndex, RetrievalIndex]:
    base = _index_dir(args, config)
    out = []
    for stage in (STAGE_ASSESSMENT, STAGE_PLAN):
        directory = base / stage
        if not directory.is_dir():
            raise DataError(f"index not found: {directory}")
        out.append(RetrievalIndex.load(directory))
    return out[0], out[1]


def _emit(args: argparse.Namespace, payload: dict, human: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human:
            print(line)


def cmd_ingest(args: argparse.Namespace, config: PipelineConfig) -> int:
    store_path = _store_path(args, config)
    if store_path.exists():
        if not args.force:
            raise DataError(
                f"note store exists, pass --force to overwrite: {store_path}"
            )
        store_path.unlink()
    records, report = load_corpus(args.corpus, strict=args.strict)
    store = Store(store_path)
    stored = store.add_notes(n for r in records for n in r.visits)
    store.close()
    payload = {"report": report.to_dict(), "patients": len(records), "stored": stored}
    _emit(
        args,
        payload,
        [
            f"read {report.read} lines, loaded {report.loaded} notes "
            f"({report.duplicates} duplicates, "
            f"{sum(report.dropped.values())} dropped, "
            f"{len(report.malformed_lines)} malformed)",
            f"stored {stored} notes across {len(records)} patients in {store_path}",
        ],
    )
    return 0


def cmd_split(args: argparse.Namespace, config: PipelineConfig) -> int:
    out = Path(args.out)
    _guard_overwrite(out, args.force)
    store = _open_store(args, config)
    records = store.records()
    store.close()
    ratio = args.train_ratio if args.train_ratio is not None else config.train_ratio
    try:
        split = split_corpus(
            records, args.kb_count, args.eval_count, config.rng_seed, ratio
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    split.save(out)
    payload = split.to_dict()
    _emit(
        args,
        payload,
        [
            f"kb={len(split.kb_mrns)} train={len(split.train_mrns)} "
            f"test={len(split.test_mrns)} seed={split.seed} -> {out}"
        ],
    )
    return 0


def cmd_index(args: argparse.Namespace, config: PipelineConfig) -> int:
    store = _open_store(args, config)
    records = store.records()
    store.close()
    split = CorpusSplit.load(_existing_file(args.split, "split file"))
    kb_notes = [
        note
        for record in records
        if record.mrn in split.kb_mrns
        for note in record.visits
    ]
    gateway = make_embedder(config)
    base = Path(args.out_dir) if args.out_dir else Path(config.index_dir)
    summary: dict[str, dict] = {}
    for stage in (STAGE_ASSESSMENT, STAGE_PLAN):
        directory = base / stage
        _guard_overwrite(directory / "meta.json", args.force)
        index, report = build_index(
            kb_notes, stage, gateway, k1=config.bm25_k1, b=config.bm25_b
        )
        index.save(directory)
        summary[stage] = {"indexed": report.indexed, "skipped": report.skipped}
    _emit(
        args,
        {"indexes": summary, "out_dir": str(base)},
        [
            f"{stage}: indexed {info['indexed']} skipped {info['skipped']}"
            for stage, info in summary.items()
        ]
        + [f"wrote indexes under {base}"],
    )
    return 0


def _existing_file(path_str: str, label: str) -> Path:
    path = Path(path_str)
    if not path.is_file():
        raise DataError(f"{label} not found: {path}")
    return path


def cmd_export_tuning(args: argparse.Namespace, config: PipelineConfig) -> int:
    out = Path(args.out)
    _guard_overwrite(out, args.force)
    store = _open_store(args, config)
    records = store.records()
    store.close()
    split = CorpusSplit.load(_existing_file(args.split, "split file"))
    assessment_index, plan_index = _load_indexes(args, config)
    gateway = make_embedder(config)
    reranker = make_reranker(config)
    stages = (
        (STAGE_ASSESSMENT, STAGE_PLAN) if args.stage == "both" else (args.stage,)
    )
    pairs = []
    reports = {}
    for stage in stages:
        index = assessment_index if stage == STAGE_ASSESSMENT else plan_index
        stage_pairs, report = export_tuning_pairs(
            split, records, config, stage, index, gateway, reranker
        )
        pairs.extend(stage_pairs)
        reports[stage] = report.to_dict()
    write_tuning_pairs(pairs, out)
    _emit(
        args,
        {"out": str(out), "reports": reports, "pairs": len(pairs)},
        [f"wrote {len(pairs)} tuning pairs to {out}"],
    )
    return 0


def cmd_generate(args: argparse.Namespace, config: PipelineConfig) -> int:
    store = _open_store(args, config)
    visits = store.visits(args.mrn)
    store.close()
    if config.strict_mrn and not visits:
        raise DataError(f"unknown mrn: {args.mrn}")
    assessment_index, plan_index = _load_indexes(args, config)
    pipeline = Pipeline(
        config,
        assessment_index,
        plan_index,
        make_embedder(config),
        make_reranker(config),
        make_generator(config),
    )
    try:
        if args.two_stage:
            result = pipeline.run_two_stage(
                args.subjective, args.objective, args.mrn, visits
            )
            views = {
                "assessment": _stage_view(result.assessment),
                "plan": _stage_view(result.plan),
            }
        else:
            out = pipeline.run_single_pass(
                args.subjective, args.objective, args.mrn, visits
            )
            views = {"plan": _stage_view(out)}
    except ValueError as exc:
        raise DataError(str(exc))
    lines: list[str] = []
    for stage in ("assessment", "plan"):
        view = views.get(stage)
        if view is None:
            continue
        label = stage.capitalize()
        refs = ", ".join(view["references_used"]) or "(none)"
        lines.append(f"{label}: {view['text']}")
        lines.append(f"{label} references: {refs}")
    _emit(args, views, lines)
    return 0


def _load_ablations(path_str: str | None, provider_tag: str) -> list[AblationConfig]:
    if path_str is None:
        return full_ablation_matrix(provider_tag)
    data = json.loads(_existing_file(path_str, "ablation file").read_text("utf-8"))
    if not isinstance(data, list) or not data:
        raise DataError("ablation file must hold a non-empty JSON list")
    out = []
    for item in data:
        out.append(
            AblationConfig(
                planning_method=item["planning_method"],
                use_self_history=bool(item["use_self_history"]),
                use_cross_patient=bool(item["use_cross_patient"]),
                provider_tag=str(item.get("provider_tag", provider_tag)),
                instruction_tuning=bool(item.get("instruction_tuning", False)),
                notes=str(item.get("notes", "")),
            )
        )
    return out


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    store = _open_store(args, config)
    records = store.records()
    store.close()
    split = CorpusSplit.load(_existing_file(args.split, "split file"))
    cases, case_report = build_eval_cases(split, records, config)
    if not cases:
        raise DataError("no eligible cases")
    assessment_index, plan_index = _load_indexes(args, config)
    generator = make_generator(config)
    ablations = _load_ablations(args.ablation, generator.provider_tag)
    out_dir = Path(args.out_dir)
    plan_csv = out_dir / "plan_table.csv"
    _guard_overwrite(plan_csv, args.force)
    report = run_ablation(
        cases,
        ablations,
        config,
        assessment_index,
        plan_index,
        make_embedder(config),
        make_reranker(config),
        generator,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_plan_csv(plan_csv)
    report.write_assessment_csv(out_dir / "assessment_table.csv")
    report.write_json(out_dir / "report.json")
    report.write_predictions(out_dir / "predictions.jsonl")
    payload = {
        "out_dir": str(out_dir),
        "cases": report.case_count,
        "excluded": case_report.to_dict()["excluded"],
        "rows": len(report.plan_rows),
    }
    _emit(
        args,
        payload,
        [
            f"evaluated {report.case_count} cases over {len(report.plan_rows)} "
            f"configs -> {out_dir}"
        ],
    )
    return 0


def cmd_serve(args: argparse.Namespace, config: PipelineConfig) -> int:
    import uvicorn

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stdout,
    )
    store_path = _store_path(args, config)
    assessment_index = plan_index = None
    base = _index_dir(args, config)
    if (base / STAGE_ASSESSMENT).is_dir() and (base / STAGE_PLAN).is_dir():
        assessment_index = RetrievalIndex.load(base / STAGE_ASSESSMENT)
        plan_index = RetrievalIndex.load(base / STAGE_PLAN)
    app = create_app(
        config,
        store=Store(store_path),
        assessment_index=assessment_index,
        plan_index=plan_index,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args)
        return args.func(args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CorpusFormatError, SplitError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ProviderError, IndexBuildError, StageError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
