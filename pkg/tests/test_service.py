"""HTTP service contract: async task lifecycle, note storage, and failure
modes, all against an in-memory store with mock providers."""

from __future__ import annotations

import time
from datetime import date

import pytest
from fastapi.testclient import TestClient

from soapgen import (
    STAGE_PLAN,
    MockEmbedder,
    MockGenerator,
    MockReranker,
    PipelineConfig,
    ProviderError,
    RetrievalIndex,
    SlowMockGenerator,
    STAGE_ASSESSMENT,
    build_index,
    create_app,
)
from soapgen.service import Store, DuplicateNoteError

from conftest import make_corpus_notes

STAGE_VIEW_KEYS = {
    "stage", "text", "provider_tag", "prompt_fingerprint", "references_used",
    "self_history", "cross_patient", "rerank_fallback",
}


class FakeClock:
    def __init__(self, start: float = 1_000_000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def seeded_store() -> Store:
    store = Store(":memory:")
    store.add_notes(make_corpus_notes(6, seed=71))
    return store


def build_app(
    config: PipelineConfig | None = None,
    store: Store | None = None,
    generator=None,
    clock=None,
    with_indexes: bool = True,
):
    config = config or PipelineConfig()
    store = store or seeded_store()
    embedder = MockEmbedder(seed=0, dim=config.embed_dim)
    assessment_index = plan_index = None
    if with_indexes:
        notes = store.all_notes()
        assessment_index, _ = build_index(notes, STAGE_ASSESSMENT, embedder)
        plan_index, _ = build_index(notes, STAGE_PLAN, embedder)
    app = create_app(
        config,
        store=store,
        gateway=embedder,
        reranker=MockReranker(),
        generator=generator or MockGenerator(),
        assessment_index=assessment_index,
        plan_index=plan_index,
        clock=clock or time.time,
    )
    return app, store


def wait_for(client: TestClient, task_id: str, deadline: float = 5.0) -> dict:
    start = time.monotonic()
    while time.monotonic() - start < deadline:
        resp = client.get(f"/api/v1/tasks/{task_id}")
        assert resp.status_code == 200, resp.text
        body = resp.json()
        if body["status"] in ("done", "failed"):
            return body
        time.sleep(0.01)
    raise AssertionError(f"task {task_id} did not settle within {deadline}s")


def known_mrn(store: Store) -> str:
    return store.all_notes()[0].mrn


class TestStore:
    def test_sequence_numbers_append(self):
        store = Store(":memory:")
        first = store.add_note("M1", date(2024, 1, 1), "s one", "o one", "a", "p")
        second = store.add_note("M1", date(2024, 2, 1), "s two", "o two", "a", "p")
        assert (first.visit_seq, second.visit_seq) == (1, 2)
        assert [n.visit_seq for n in store.visits("M1")] == [1, 2]

    def test_duplicate_rejected(self):
        store = Store(":memory:")
        store.add_note("M1", date(2024, 1, 1), "s one", "o one", "a", "p")
        with pytest.raises(DuplicateNoteError):
            store.add_note("M1", date(2024, 1, 1), "s one", "o one", "a", "p")

    def test_history_most_recent_first(self):
        store = Store(":memory:")
        for month in (1, 2, 3):
            store.add_note(
                "M1", date(2024, month, 1), f"s {month}", f"o {month}", "a", "p"
            )
        got = store.history("M1", 2)
        assert [n.visit_seq for n in got] == [3, 2]

    def test_records_preserve_stored_sequences(self):
        store = seeded_store()
        for record in store.records():
            assert [v.visit_seq for v in record.visits] == list(
                range(1, len(record.visits) + 1)
            )

    def test_task_status_transitions_are_guarded(self):
        store = Store(":memory:")
        store.create_task("t1", "pipeline", {"mrn": "M1"}, 1.0)
        # done before running is a no-op; the task must pass through running
        store.set_done("t1", {"x": 1}, 2.0)
        assert store.get_task("t1").status == "pending"
        store.set_running("t1", 3.0)
        store.set_running("t1", 4.0)  # second transition is a no-op
        assert store.get_task("t1").updated_at == 3.0
        store.set_done("t1", {"x": 1}, 5.0)
        assert store.get_task("t1").status == "done"
        # terminal states never regress
        store.set_failed("t1", "late", None, 6.0)
        assert store.get_task("t1").status == "done"

    def test_fail_inflight(self):
        store = Store(":memory:")
        store.create_task("t1", "pipeline", {}, 1.0)
        store.create_task("t2", "pipeline", {}, 1.0)
        store.set_running("t2", 2.0)
        store.create_task("t3", "pipeline", {}, 1.0)
        store.set_running("t3", 2.0)
        store.set_done("t3", {}, 3.0)
        assert store.fail_inflight(4.0) == 2
        assert store.get_task("t1").status == "failed"
        assert store.get_task("t1").error == "restart"
        assert store.get_task("t3").status == "done"

    def test_purge_only_terminal(self):
        store = Store(":memory:")
        store.create_task("t1", "pipeline", {}, 1.0)
        store.create_task("t2", "pipeline", {}, 1.0)
        store.set_running("t2", 1.0)
        store.set_done("t2", {}, 1.0)
        assert store.purge_expired(now=100.0, ttl=10.0) == 1
        assert store.get_task("t1") is not None
        assert store.get_task("t2") is None


class TestTaskLifecycle:
    def test_pipeline_round_trip(self):
        app, store = build_app()
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/pipeline",
                json={"mrn": mrn, "subjective": "worsening cough at night",
                      "objective": "afebrile mild wheeze"},
            )
            assert resp.status_code == 202
            task_id = resp.json()["task_id"]
            assert len(task_id) == 32
            body = wait_for(client, task_id)
        assert body["status"] == "done"
        assert body["kind"] == "pipeline"
        result = body["result"]
        assert set(result) == {"assessment", "plan"}
        for stage_name, suffix in (("assessment", ":soa"), ("plan", ":soap")):
            view = result[stage_name]
            assert set(view) == STAGE_VIEW_KEYS
            assert view["stage"] == stage_name
            assert view["text"]
            assert len(view["prompt_fingerprint"]) == 64
            assert all(
                ref["doc_id"].endswith(suffix) for ref in view["cross_patient"]
            )
            assert all(not h.endswith((":soa", ":soap")) for h in view["self_history"])
        assert "error" not in body
        assert "partial" not in body

    def test_assessment_endpoint(self):
        app, store = build_app()
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/assessment",
                json={"mrn": mrn, "subjective": "headache two weeks",
                      "objective": "neuro exam normal"},
            )
            body = wait_for(client, resp.json()["task_id"])
        assert body["status"] == "done"
        assert set(body["result"]) == {"assessment"}

    def test_plan_endpoint_uses_submitted_assessment(self):
        app, store = build_app()
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/plan",
                json={"mrn": mrn, "subjective": "headache two weeks",
                      "objective": "neuro exam normal",
                      "assessment": "tension headache"},
            )
            body = wait_for(client, resp.json()["task_id"])
        assert body["status"] == "done"
        assert set(body["result"]) == {"plan"}
        assert body["result"]["plan"]["stage"] == "plan"

    def test_resubmission_is_deterministic(self):
        app, store = build_app()
        mrn = known_mrn(store)
        payload = {"mrn": mrn, "subjective": "worsening cough at night",
                   "objective": "afebrile mild wheeze"}
        with TestClient(app) as client:
            first = wait_for(
                client, client.post("/api/v1/pipeline", json=payload).json()["task_id"]
            )
            second = wait_for(
                client, client.post("/api/v1/pipeline", json=payload).json()["task_id"]
            )
        assert first["task_id"] != second["task_id"]
        assert first["result"] == second["result"]

    def test_task_ids_unique(self):
        app, store = build_app()
        mrn = known_mrn(store)
        payload = {"mrn": mrn, "subjective": "stable follow up today",
                   "objective": "vitals in range"}
        with TestClient(app) as client:
            ids = {
                client.post("/api/v1/assessment", json=payload).json()["task_id"]
                for _ in range(20)
            }
            for task_id in ids:
                wait_for(client, task_id)
        assert len(ids) == 20

    def test_unknown_task(self):
        app, _ = build_app()
        with TestClient(app) as client:
            resp = client.get("/api/v1/tasks/deadbeef")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_task"

    def test_ttl_purges_finished_tasks(self):
        clock = FakeClock()
        cfg = PipelineConfig(task_ttl_seconds=60.0)
        app, store = build_app(config=cfg, clock=clock)
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/assessment",
                json={"mrn": mrn, "subjective": "stable follow up",
                      "objective": "vitals in range"},
            )
            task_id = resp.json()["task_id"]
            assert wait_for(client, task_id)["status"] == "done"
            clock.advance(61.0)
            resp = client.get(f"/api/v1/tasks/{task_id}")
            assert resp.status_code == 404
            assert resp.json()["code"] == "unknown_task"

    def test_fresh_tasks_survive_purge(self):
        clock = FakeClock()
        cfg = PipelineConfig(task_ttl_seconds=60.0)
        app, store = build_app(config=cfg, clock=clock)
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/assessment",
                json={"mrn": mrn, "subjective": "stable follow up",
                      "objective": "vitals in range"},
            )
            task_id = resp.json()["task_id"]
            wait_for(client, task_id)
            clock.advance(59.0)
            assert client.get(f"/api/v1/tasks/{task_id}").status_code == 200

    def test_restart_fails_inflight_tasks(self):
        store = seeded_store()
        store.create_task("stale001", "pipeline", {"mrn": "X"}, 1.0)
        store.set_running("stale001", 2.0)
        app, _ = build_app(store=store)
        with TestClient(app) as client:
            body = client.get("/api/v1/tasks/stale001").json()
        assert body["status"] == "failed"
        assert body["error"] == "restart"

    def test_queue_full_returns_503_and_drops_record(self):
        cfg = PipelineConfig(queue_size=1, workers=1)
        app, store = build_app(config=cfg, generator=SlowMockGenerator(delay=0.4))
        mrn = known_mrn(store)
        payload = {"mrn": mrn, "subjective": "stable follow up",
                   "objective": "vitals in range"}
        with TestClient(app) as client:
            accepted = []
            rejected = None
            for _ in range(6):
                resp = client.post("/api/v1/assessment", json=payload)
                if resp.status_code == 202:
                    accepted.append(resp.json()["task_id"])
                else:
                    rejected = resp
                    break
            assert rejected is not None, "queue never filled"
            assert rejected.status_code == 503
            assert rejected.json()["code"] == "queue_full"
            for task_id in accepted:
                assert wait_for(client, task_id)["status"] == "done"

    def test_stage_two_failure_retains_assessment_partial(self):
        class PlanOutage(MockGenerator):
            provider_tag = "plan-outage"

            def complete(self, prompt, temperature=0.0, max_tokens=1024):
                if prompt.stage == STAGE_PLAN:
                    raise ProviderError("plan provider down", retryable=False)
                return super().complete(prompt, temperature, max_tokens)

        app, store = build_app(generator=PlanOutage())
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/pipeline",
                json={"mrn": mrn, "subjective": "worsening cough",
                      "objective": "mild wheeze"},
            )
            body = wait_for(client, resp.json()["task_id"])
        assert body["status"] == "failed"
        assert "stage plan failed" in body["error"]
        assert "result" not in body
        partial = body["partial"]
        assert set(partial) == {"assessment"}
        assert partial["assessment"]["stage"] == "assessment"
        assert partial["assessment"]["text"]

    def test_stage_one_failure_has_no_partial(self):
        class Outage(MockGenerator):
            provider_tag = "outage"

            def complete(self, prompt, temperature=0.0, max_tokens=1024):
                raise ProviderError("down", retryable=False)

        app, store = build_app(generator=Outage())
        mrn = known_mrn(store)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/pipeline",
                json={"mrn": mrn, "subjective": "worsening cough",
                      "objective": "mild wheeze"},
            )
            body = wait_for(client, resp.json()["task_id"])
        assert body["status"] == "failed"
        assert "partial" not in body


class TestSubmissionValidation:
    @pytest.fixture
    def client(self):
        app, store = build_app()
        self.mrn = known_mrn(store)
        with TestClient(app) as client:
            yield client

    def test_missing_mrn(self, client):
        resp = client.post(
            "/api/v1/pipeline",
            json={"subjective": "cough", "objective": "wheeze"},
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "mrn_missing"

    def test_short_subjective(self, client):
        resp = client.post(
            "/api/v1/pipeline",
            json={"mrn": self.mrn, "subjective": " ", "objective": "wheeze"},
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "subjective_too_short"

    def test_missing_objective(self, client):
        resp = client.post(
            "/api/v1/pipeline",
            json={"mrn": self.mrn, "subjective": "cough at night"},
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "objective_too_short"

    def test_plan_requires_assessment(self, client):
        resp = client.post(
            "/api/v1/plan",
            json={"mrn": self.mrn, "subjective": "cough at night",
                  "objective": "mild wheeze"},
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "assessment_too_short"

    def test_non_object_body(self, client):
        resp = client.post("/api/v1/pipeline", json=["not", "an", "object"])
        assert resp.status_code == 400
        assert resp.json()["code"] == "invalid_body"

    def test_strict_mrn_rejects_unknown(self):
        cfg = PipelineConfig(strict_mrn=True)
        app, store = build_app(config=cfg)
        with TestClient(app) as client:
            resp = client.post(
                "/api/v1/pipeline",
                json={"mrn": "NOBODY99", "subjective": "cough at night",
                      "objective": "mild wheeze"},
            )
            assert resp.status_code == 404
            assert resp.json()["code"] == "unknown_mrn"
            resp = client.post(
                "/api/v1/pipeline",
                json={"mrn": "NOBODY99", "subjective": "cough at night",
                      "objective": "mild wheeze", "new_patient": True},
            )
            assert resp.status_code == 202
            wait_for(client, resp.json()["task_id"])


class TestNotesEndpoints:
    @pytest.fixture
    def client(self):
        app, store = build_app()
        self.store = store
        self.mrn = known_mrn(store)
        with TestClient(app) as client:
            yield client

    def test_ingest_appends_sequence(self, client):
        body = {"visit_date": "2025-01-15", "s": "new complaint today",
                "o": "exam unremarkable", "a": "observation", "p": "recheck"}
        before = len(self.store.visits(self.mrn))
        resp = client.post(f"/api/v1/patients/{self.mrn}/notes", json=body)
        assert resp.status_code == 201
        note = resp.json()
        assert note["visit_seq"] == before + 1
        assert note["mrn"] == self.mrn
        assert note["s"] == "new complaint today"

    def test_ingest_normalizes_fields(self, client):
        body = {"visit_date": "2025-01-15", "s": "  spaced   text ",
                "o": "obs,,here", "a": "aa", "p": "pp"}
        resp = client.post(f"/api/v1/patients/{self.mrn}/notes", json=body)
        assert resp.status_code == 201
        assert resp.json()["s"] == "spaced text"
        assert resp.json()["o"] == "obs,here"

    def test_ingest_duplicate(self, client):
        body = {"visit_date": "2025-01-15", "s": "new complaint today",
                "o": "exam unremarkable", "a": "observation", "p": "recheck"}
        assert client.post(
            f"/api/v1/patients/{self.mrn}/notes", json=body
        ).status_code == 201
        resp = client.post(f"/api/v1/patients/{self.mrn}/notes", json=body)
        assert resp.status_code == 409
        assert resp.json()["code"] == "duplicate_note"

    def test_ingest_bad_date(self, client):
        body = {"visit_date": "15/01/2025", "s": "complaint", "o": "exam",
                "a": "aa", "p": "pp"}
        resp = client.post(f"/api/v1/patients/{self.mrn}/notes", json=body)
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_visit_date"

    def test_ingest_short_field(self, client):
        body = {"visit_date": "2025-01-15", "s": "x", "o": "exam fine",
                "a": "aa", "p": "pp"}
        resp = client.post(f"/api/v1/patients/{self.mrn}/notes", json=body)
        assert resp.status_code == 400
        assert resp.json()["code"] == "subjective_too_short"

    def test_history_most_recent_first_with_limit(self, client):
        resp = client.get(f"/api/v1/patients/{self.mrn}/history?limit=2")
        assert resp.status_code == 200
        body = resp.json()
        assert body["mrn"] == self.mrn
        assert len(body["visits"]) == 2
        total = len(self.store.visits(self.mrn))
        assert body["visits"][0]["visit_seq"] == total
        assert body["visits"][1]["visit_seq"] == total - 1

    def test_history_default_limit(self, client):
        resp = client.get(f"/api/v1/patients/{self.mrn}/history")
        assert resp.status_code == 200
        assert len(resp.json()["visits"]) <= 20

    def test_history_unknown_mrn(self, client):
        resp = client.get("/api/v1/patients/GHOST42/history")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_mrn"

    def test_history_bad_limit(self, client):
        resp = client.get(f"/api/v1/patients/{self.mrn}/history?limit=0")
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_limit"


class TestIndexOnIngest:
    def test_new_notes_become_retrievable(self):
        cfg = PipelineConfig(index_on_ingest=True, strict_mrn=False, n_ref=2,
                             n_sim=4)
        store = Store(":memory:")
        embedder = MockEmbedder(seed=0, dim=cfg.embed_dim)
        app = create_app(
            cfg,
            store=store,
            gateway=embedder,
            reranker=MockReranker(),
            generator=MockGenerator(),
            assessment_index=RetrievalIndex(STAGE_ASSESSMENT, []),
            plan_index=RetrievalIndex(STAGE_PLAN, []),
        )
        full = {"visit_date": "2025-02-01",
                "s": "persistent dry cough for weeks",
                "o": "lungs clear chest xray normal",
                "a": "post viral cough", "p": "antitussive and recheck"}
        planless = {"visit_date": "2025-02-02",
                    "s": "persistent dry cough again",
                    "o": "lungs clear on exam",
                    "a": "lingering post viral cough", "p": ""}
        with TestClient(app) as client:
            assert client.post(
                "/api/v1/patients/KB0001/notes", json=full
            ).status_code == 201
            assert client.post(
                "/api/v1/patients/KB0002/notes", json=planless
            ).status_code == 201
            resp = client.post(
                "/api/v1/pipeline",
                json={"mrn": "NEW0001",
                      "subjective": "dry cough that will not settle",
                      "objective": "clear lungs and normal film"},
            )
            body = wait_for(client, resp.json()["task_id"])
        assert body["status"] == "done"
        a_refs = {r["doc_id"] for r in body["result"]["assessment"]["cross_patient"]}
        p_refs = {r["doc_id"] for r in body["result"]["plan"]["cross_patient"]}
        assert a_refs == {"KB0001:1:soa", "KB0002:1:soa"}
        # the plan-less note is ineligible for the plan-stage index
        assert p_refs == {"KB0001:1:soap"}
