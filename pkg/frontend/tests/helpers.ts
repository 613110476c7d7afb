import { StageView, TaskView, Visit } from "../src/types";

export function stageView(overrides: Partial<StageView> = {}): StageView {
  return {
    stage: "assessment",
    text: "stable angina",
    provider_tag: "mock-echo",
    prompt_fingerprint: "f".repeat(64),
    references_used: ["P0002:1", "P0003:2:soa"],
    self_history: ["P0002:1"],
    cross_patient: [{ doc_id: "P0003:2:soa", score: 0.9046 }],
    rerank_fallback: false,
    ...overrides,
  };
}

export function planView(overrides: Partial<StageView> = {}): StageView {
  return stageView({
    stage: "plan",
    text: "start low dose ace inhibitor",
    references_used: ["P0002:1", "P0005:1:soap"],
    cross_patient: [{ doc_id: "P0005:1:soap", score: 0.8124 }],
    ...overrides,
  });
}

export function task(
  taskId: string,
  status: TaskView["status"],
  extra: Partial<TaskView> = {},
): TaskView {
  return {
    task_id: taskId,
    kind: "pipeline",
    status,
    created_at: 1,
    updated_at: 2,
    ...extra,
  };
}

export function visit(seq: number, overrides: Partial<Visit> = {}): Visit {
  return {
    mrn: "P0001",
    visit_date: `2024-01-${String(seq).padStart(2, "0")}`,
    visit_seq: seq,
    s: `subjective of visit ${seq}`,
    o: `objective of visit ${seq}`,
    a: `assessment of visit ${seq}`,
    p: `plan of visit ${seq}`,
    ...overrides,
  };
}

/** Newest-first list of `count` visits, matching the server's ordering. */
export function visits(count: number): Visit[] {
  const out: Visit[] = [];
  for (let seq = count; seq >= 1; seq--) {
    out.push(visit(seq));
  }
  return out;
}
