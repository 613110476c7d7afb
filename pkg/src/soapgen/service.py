"""Asynchronous HTTP service: note storage, task queue with polling, and
the generation endpoints."""

from __future__ import annotations

import json
import logging
import queue
import secrets
import sqlite3
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable, Iterable

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .core import (
    PatientRecord,
    PipelineConfig,
    SoapNote,
    normalize_text,
    validate_note,
)
from .embedding import EmbeddingProvider, make_embedder
from .generation import (
    GeneratorProvider,
    Pipeline,
    StageError,
    StageOutput,
    make_generator,
)
from .retrieval import (
    STAGE_ASSESSMENT,
    STAGE_PLAN,
    IndexedDocument,
    RerankerProvider,
    RetrievalIndex,
    compose_key_text,
    make_reranker,
    note_doc_id,
)

log = logging.getLogger("soapgen.service")

KIND_ASSESSMENT = "assessment"
KIND_PLAN = "plan"
KIND_PIPELINE = "pipeline"

PENDING = "pending"
RUNNING = "running"
DONE = "done"
FAILED = "failed"


class DuplicateNoteError(Exception):
    pass


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class TaskView:
    task_id: str
    kind: str
    status: str
    request: dict
    result: dict | None
    partial: dict | None
    error: str | None
    created_at: float
    updated_at: float

    def to_public(self) -> dict:
        body: dict = {
            "task_id": self.task_id,
            "kind": self.kind,
            "status": self.status,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }
        if self.status == DONE:
            body["result"] = self.result
        if self.status == FAILED:
            body["error"] = self.error
            if self.partial is not None:
                body["partial"] = self.partial
        return body


class Store:
    """Embedded transactional store for patient notes and task records.
    A single connection guarded by a lock serializes writes; reads share it."""

    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._lock = threading.RLock()
        with self._lock:
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS notes ("
                " mrn TEXT NOT NULL, visit_seq INTEGER NOT NULL,"
                " visit_date TEXT NOT NULL, s TEXT NOT NULL, o TEXT NOT NULL,"
                " a TEXT NOT NULL, p TEXT NOT NULL, dept TEXT,"
                " PRIMARY KEY (mrn, visit_seq))"
            )
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS tasks ("
                " task_id TEXT PRIMARY KEY, kind TEXT NOT NULL,"
                " status TEXT NOT NULL, request TEXT NOT NULL, result TEXT,"
                " partial TEXT, error TEXT, created_at REAL NOT NULL,"
                " updated_at REAL NOT NULL)"
            )
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- notes -------------------------------------------------------------

    @staticmethod
    def _note_from_row(row: sqlite3.Row) -> SoapNote:
        return SoapNote(
            mrn=row["mrn"],
            visit_date=date.fromisoformat(row["visit_date"]),
            visit_seq=row["visit_seq"],
            subjective=row["s"],
            objective=row["o"],
            assessment=row["a"],
            plan=row["p"],
            department=row["dept"],
        )

    def add_note(
        self,
        mrn: str,
        visit_date: date,
        subjective: str,
        objective: str,
        assessment: str,
        plan: str,
        department: str | None = None,
    ) -> SoapNote:
        """Append a visit with the next sequence number for the patient.
        An identical resubmission (same mrn, date, and fields) is rejected."""
        with self._lock:
            dup = self._conn.execute(
                "SELECT 1 FROM notes WHERE mrn=? AND visit_date=? AND s=?"
                " AND o=? AND a=? AND p=? AND dept IS ?",
                (mrn, visit_date.isoformat(), subjective, objective,
                 assessment, plan, department),
            ).fetchone()
            if dup is not None:
                raise DuplicateNoteError(f"duplicate note for {mrn}")
            row = self._conn.execute(
                "SELECT COALESCE(MAX(visit_seq), 0) + 1 AS seq FROM notes WHERE mrn=?",
                (mrn,),
            ).fetchone()
            seq = int(row["seq"])
            self._conn.execute(
                "INSERT INTO notes (mrn, visit_seq, visit_date, s, o, a, p, dept)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (mrn, seq, visit_date.isoformat(), subjective, objective,
                 assessment, plan, department),
            )
            self._conn.commit()
        return SoapNote(
            mrn=mrn,
            visit_date=visit_date,
            visit_seq=seq,
            subjective=subjective,
            objective=objective,
            assessment=assessment,
            plan=plan,
            department=department,
        )

    def add_notes(self, notes: Iterable[SoapNote]) -> int:
        count = 0
        for note in notes:
            self.add_note(
                note.mrn, note.visit_date, note.subjective, note.objective,
                note.assessment, note.plan, note.department,
            )
            count += 1
        return count

    def visits(self, mrn: str) -> list[SoapNote]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM notes WHERE mrn=? ORDER BY visit_seq ASC", (mrn,)
            ).fetchall()
        return [self._note_from_row(r) for r in rows]

    def history(self, mrn: str, limit: int) -> list[SoapNote]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM notes WHERE mrn=? ORDER BY visit_seq DESC LIMIT ?",
                (mrn, limit),
            ).fetchall()
        return [self._note_from_row(r) for r in rows]

    def known(self, mrn: str) -> bool:
        with self._lock:
            row = self._conn.execute(
                "SELECT 1 FROM notes WHERE mrn=? LIMIT 1", (mrn,)
            ).fetchone()
        return row is not None

    def all_notes(self) -> list[SoapNote]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM notes ORDER BY mrn ASC, visit_seq ASC"
            ).fetchall()
        return [self._note_from_row(r) for r in rows]

    def records(self) -> list[PatientRecord]:
        by_mrn: dict[str, list[SoapNote]] = {}
        for note in self.all_notes():
            by_mrn.setdefault(note.mrn, []).append(note)
        return [
            PatientRecord(mrn=mrn, visits=tuple(by_mrn[mrn]))
            for mrn in sorted(by_mrn)
        ]

    # -- tasks -------------------------------------------------------------

    def create_task(self, task_id: str, kind: str, request: dict, now: float) -> None:
        with self._lock:
            self._conn.execute(
                "INSERT INTO tasks (task_id, kind, status, request, created_at,"
                " updated_at) VALUES (?, ?, ?, ?, ?, ?)",
                (task_id, kind, PENDING, json.dumps(request, sort_keys=True),
                 now, now),
            )
            self._conn.commit()

    def delete_task(self, task_id: str) -> None:
        with self._lock:
            self._conn.execute("DELETE FROM tasks WHERE task_id=?", (task_id,))
            self._conn.commit()

    def set_running(self, task_id: str, now: float) -> None:
        with self._lock:
            self._conn.execute(
                "UPDATE tasks SET status=?, updated_at=? WHERE task_id=? AND status=?",
                (RUNNING, now, task_id, PENDING),
            )
            self._conn.commit()

    def set_done(self, task_id: str, result: dict, now: float) -> None:
        with self._lock:
            self._conn.execute(
                "UPDATE tasks SET status=?, result=?, updated_at=?"
                " WHERE task_id=? AND status=?",
                (DONE, json.dumps(result, sort_keys=True), now, task_id, RUNNING),
            )
            self._conn.commit()

    def set_failed(
        self, task_id: str, error: str, partial: dict | None, now: float
    ) -> None:
        with self._lock:
            self._conn.execute(
                "UPDATE tasks SET status=?, error=?, partial=?, updated_at=?"
                " WHERE task_id=? AND status IN (?, ?)",
                (FAILED, error,
                 None if partial is None else json.dumps(partial, sort_keys=True),
                 now, task_id, PENDING, RUNNING),
            )
            self._conn.commit()

    def get_task(self, task_id: str) -> TaskView | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM tasks WHERE task_id=?", (task_id,)
            ).fetchone()
        if row is None:
            return None
        return TaskView(
            task_id=row["task_id"],
            kind=row["kind"],
            status=row["status"],
            request=json.loads(row["request"]),
            result=json.loads(row["result"]) if row["result"] else None,
            partial=json.loads(row["partial"]) if row["partial"] else None,
            error=row["error"],
            created_at=row["created_at"],
            updated_at=row["updated_at"],
        )

    def fail_inflight(self, now: float) -> int:
        """Mark tasks left over from a previous process as failed."""
        with self._lock:
            cur = self._conn.execute(
                "UPDATE tasks SET status=?, error=?, updated_at=?"
                " WHERE status IN (?, ?)",
                (FAILED, "restart", now, PENDING, RUNNING),
            )
            self._conn.commit()
        return cur.rowcount

    def purge_expired(self, now: float, ttl: float) -> int:
        with self._lock:
            cur = self._conn.execute(
                "DELETE FROM tasks WHERE status IN (?, ?) AND updated_at < ?",
                (DONE, FAILED, now - ttl),
            )
            self._conn.commit()
        return cur.rowcount


class TaskQueue:
    """Bounded in-process queue drained by a fixed worker pool."""

    def __init__(
        self,
        runner: Callable[[TaskView], dict],
        store: Store,
        clock: Callable[[], float],
        queue_size: int,
        workers: int,
    ):
        self._runner = runner
        self._store = store
        self._clock = clock
        self._queue: queue.Queue[str | None] = queue.Queue(maxsize=queue_size)
        self._threads = [
            threading.Thread(target=self._worker, daemon=True, name=f"soapgen-worker-{i}")
            for i in range(workers)
        ]
        for thread in self._threads:
            thread.start()

    def submit(self, task_id: str) -> bool:
        try:
            self._queue.put_nowait(task_id)
        except queue.Full:
            return False
        return True

    def _worker(self) -> None:
        while True:
            task_id = self._queue.get()
            if task_id is None:
                self._queue.task_done()
                return
            try:
                self._run_one(task_id)
            except Exception:
                log.exception("worker failure on task %s", task_id)
            finally:
                self._queue.task_done()

    def _run_one(self, task_id: str) -> None:
        task = self._store.get_task(task_id)
        if task is None or task.status != PENDING:
            return
        self._store.set_running(task_id, self._clock())
        try:
            result = self._runner(task)
        except StageError as exc:
            partial = None
            if exc.partial is not None:
                partial = {"assessment": _stage_view(exc.partial)}
            self._store.set_failed(task_id, str(exc), partial, self._clock())
            log.info("task %s failed: %s", task_id, exc)
            return
        except Exception as exc:
            self._store.set_failed(task_id, str(exc), None, self._clock())
            log.info("task %s failed: %s", task_id, exc)
            return
        self._store.set_done(task_id, result, self._clock())
        log.info("task %s done", task_id)

    def shutdown(self) -> None:
        for _ in self._threads:
            self._queue.put(None)
        for thread in self._threads:
            thread.join(timeout=5.0)


@dataclass
class ServiceState:
    config: PipelineConfig
    store: Store
    gateway: EmbeddingProvider
    reranker: RerankerProvider
    generator: GeneratorProvider
    clock: Callable[[], float]
    assessment_index: RetrievalIndex | None
    plan_index: RetrievalIndex | None
    index_lock: threading.Lock
    tasks: TaskQueue | None = None

    def pipeline(self) -> Pipeline:
        empty_a = RetrievalIndex(STAGE_ASSESSMENT, [])
        empty_p = RetrievalIndex(STAGE_PLAN, [])
        return Pipeline(
            self.config,
            self.assessment_index or empty_a,
            self.plan_index or empty_p,
            self.gateway,
            self.reranker,
            self.generator,
        )


def _stage_view(out: StageOutput) -> dict:
    return {
        "stage": out.result.stage,
        "text": out.result.text,
        "provider_tag": out.result.provider_tag,
        "prompt_fingerprint": out.result.prompt_fingerprint,
        "references_used": list(out.result.references_used),
        "self_history": list(out.bundle.history_doc_ids),
        "cross_patient": [
            {"doc_id": doc_id, "score": score}
            for doc_id, score in zip(
                out.bundle.cross_doc_ids,
                [s for _, s in out.bundle.cross_patient],
            )
        ],
        "rerank_fallback": out.bundle.rerank_fallback,
    }


def _execute_task(state: ServiceState, task: TaskView) -> dict:
    request = task.request
    mrn = request["mrn"]
    visits = state.store.visits(mrn)
    with state.index_lock:
        pipeline = state.pipeline()
    if task.kind == KIND_ASSESSMENT:
        out = pipeline.run_assessment(
            request["subjective"], request["objective"], mrn, visits
        )
        return {"assessment": _stage_view(out)}
    if task.kind == KIND_PLAN:
        out = pipeline.regenerate_plan(
            request["subjective"], request["objective"], request["assessment"],
            mrn, visits,
        )
        return {"plan": _stage_view(out)}
    if task.kind == KIND_PIPELINE:
        result = pipeline.run_two_stage(
            request["subjective"], request["objective"], mrn, visits
        )
        return {
            "assessment": _stage_view(result.assessment),
            "plan": _stage_view(result.plan),
        }
    raise ValueError(f"unknown task kind {task.kind!r}")


def _require_text(body: dict, field: str, reason: str) -> str:
    value = normalize_text(str(body.get(field, "") or ""))
    if len(value) < 2:
        raise ApiError(400, reason, f"field {field!r} is missing or too short")
    return value


def _validate_submission(
    state: ServiceState, body: object, require_assessment: bool
) -> dict:
    if not isinstance(body, dict):
        raise ApiError(400, "invalid_body", "request body must be a JSON object")
    mrn = str(body.get("mrn", "") or "").strip()
    if not mrn:
        raise ApiError(400, "mrn_missing", "field 'mrn' is required")
    request = {
        "mrn": mrn,
        "subjective": _require_text(body, "subjective", "subjective_too_short"),
        "objective": _require_text(body, "objective", "objective_too_short"),
    }
    if require_assessment:
        request["assessment"] = _require_text(
            body, "assessment", "assessment_too_short"
        )
    if (
        state.config.strict_mrn
        and not bool(body.get("new_patient", False))
        and not state.store.known(mrn)
    ):
        raise ApiError(404, "unknown_mrn", f"unknown mrn {mrn!r}")
    return request


def _submit(state: ServiceState, kind: str, request: dict) -> JSONResponse:
    task_id = secrets.token_hex(16)
    state.store.create_task(task_id, kind, request, state.clock())
    assert state.tasks is not None
    if not state.tasks.submit(task_id):
        state.store.delete_task(task_id)
        raise ApiError(503, "queue_full", "task queue is full, retry later")
    log.info("task %s submitted (%s)", task_id, kind)
    return JSONResponse(status_code=202, content={"task_id": task_id})


def _index_note(state: ServiceState, note: SoapNote) -> None:
    """Insert an eligible ingested note into the live knowledge-base
    indexes by rebuilding them with the extra document."""
    plans = (
        (STAGE_ASSESSMENT, "assessment_index"),
        (STAGE_PLAN, "plan_index"),
    )
    with state.index_lock:
        for stage, attr in plans:
            index: RetrievalIndex | None = getattr(state, attr)
            if index is None:
                continue
            verdict = validate_note(
                note,
                require_assessment=True,
                require_plan=stage == STAGE_PLAN,
            )
            if not verdict:
                continue
            key = compose_key_text(
                stage,
                note.subjective,
                note.objective,
                note.assessment if stage == STAGE_PLAN else None,
            )
            vector = state.gateway.embed_texts([key], kind="document")[0]
            doc = IndexedDocument(
                doc_id=note_doc_id(note, stage),
                key_text=key,
                payload=note,
                embedding=vector,
            )
            rebuilt = RetrievalIndex(
                stage,
                list(index.documents.values()) + [doc],
                k1=index.k1,
                b=index.b,
            )
            setattr(state, attr, rebuilt)


def create_app(
    config: PipelineConfig,
    *,
    store: Store | None = None,
    gateway: EmbeddingProvider | None = None,
    reranker: RerankerProvider | None = None,
    generator: GeneratorProvider | None = None,
    assessment_index: RetrievalIndex | None = None,
    plan_index: RetrievalIndex | None = None,
    clock: Callable[[], float] = time.time,
) -> FastAPI:
    """Build the service with injectable collaborators; defaults follow the
    config (mock or HTTP providers, store path)."""
    state = ServiceState(
        config=config,
        store=store or Store(config.store_path),
        gateway=gateway or make_embedder(config),
        reranker=reranker or make_reranker(config),
        generator=generator or make_generator(config),
        clock=clock,
        assessment_index=assessment_index,
        plan_index=plan_index,
        index_lock=threading.Lock(),
    )
    failed = state.store.fail_inflight(state.clock())
    if failed:
        log.info("marked %d in-flight tasks as failed(restart)", failed)
    state.tasks = TaskQueue(
        runner=lambda task: _execute_task(state, task),
        store=state.store,
        clock=state.clock,
        queue_size=config.queue_size,
        workers=config.workers,
    )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        assert state.tasks is not None
        state.tasks.shutdown()

    app = FastAPI(
        title="soapgen", version="1.0.0", docs_url=None, redoc_url=None,
        lifespan=lifespan,
    )
    app.state.soapgen = state

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError) -> JSONResponse:
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message},
        )

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(
            status_code=400,
            content={"code": "invalid_body", "message": str(exc)},
        )

    @app.post("/api/v1/assessment", status_code=202)
    def submit_assessment(body: dict) -> JSONResponse:
        request = _validate_submission(state, body, require_assessment=False)
        return _submit(state, KIND_ASSESSMENT, request)

    @app.post("/api/v1/plan", status_code=202)
    def submit_plan(body: dict) -> JSONResponse:
        request = _validate_submission(state, body, require_assessment=True)
        return _submit(state, KIND_PLAN, request)

    @app.post("/api/v1/pipeline", status_code=202)
    def submit_pipeline(body: dict) -> JSONResponse:
        request = _validate_submission(state, body, require_assessment=False)
        return _submit(state, KIND_PIPELINE, request)

    @app.get("/api/v1/tasks/{task_id}")
    def poll_task(task_id: str) -> dict:
        now = state.clock()
        state.store.purge_expired(now, config.task_ttl_seconds)
        task = state.store.get_task(task_id)
        if task is None:
            raise ApiError(404, "unknown_task", f"unknown or expired task {task_id!r}")
        return task.to_public()

    @app.get("/api/v1/patients/{mrn}/history")
    def get_history(mrn: str, limit: int = 20) -> dict:
        if limit < 1:
            raise ApiError(400, "bad_limit", "limit must be >= 1")
        notes = state.store.history(mrn, limit)
        if not notes:
            raise ApiError(404, "unknown_mrn", f"unknown mrn {mrn!r}")
        return {"mrn": mrn, "visits": [n.to_dict() for n in notes]}

    @app.post("/api/v1/patients/{mrn}/notes", status_code=201)
    def ingest_note(mrn: str, body: dict) -> dict:
        if not isinstance(body, dict):
            raise ApiError(400, "invalid_body", "request body must be a JSON object")
        mrn = mrn.strip()
        if not mrn:
            raise ApiError(400, "mrn_missing", "mrn path segment is empty")
        try:
            visit_date = date.fromisoformat(str(body.get("visit_date", "")))
        except ValueError:
            raise ApiError(400, "bad_visit_date", "visit_date must be YYYY-MM-DD")
        dept_raw = body.get("dept")
        candidate = SoapNote(
            mrn=mrn,
            visit_date=visit_date,
            visit_seq=1,
            subjective=normalize_text(str(body.get("s", "") or "")),
            objective=normalize_text(str(body.get("o", "") or "")),
            assessment=normalize_text(str(body.get("a", "") or "")),
            plan=normalize_text(str(body.get("p", "") or "")),
            department=normalize_text(str(dept_raw)) if dept_raw else None,
        )
        verdict = validate_note(candidate)
        if not verdict:
            raise ApiError(400, verdict.reason, f"note failed validation: {verdict.reason}")
        try:
            stored = state.store.add_note(
                mrn, visit_date, candidate.subjective, candidate.objective,
                candidate.assessment, candidate.plan, candidate.department,
            )
        except DuplicateNoteError:
            raise ApiError(409, "duplicate_note", "identical note already stored")
        if config.index_on_ingest:
            _index_note(state, stored)
        return stored.to_dict()

    return app
