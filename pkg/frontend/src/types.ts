/** Wire types for the /api/v1 service endpoints. */

export type TaskStatus = "pending" | "running" | "done" | "failed";

export interface CrossReference {
  doc_id: string;
  score: number;
}

export interface StageView {
  stage: "assessment" | "plan";
  text: string;
  provider_tag: string;
  prompt_fingerprint: string;
  references_used: string[];
  self_history: string[];
  cross_patient: CrossReference[];
  rerank_fallback: boolean;
}

export type StageResult = Partial<Record<"assessment" | "plan", StageView>>;

export interface TaskView {
  task_id: string;
  kind: string;
  status: TaskStatus;
  created_at: number;
  updated_at: number;
  result?: StageResult;
  error?: string | null;
  partial?: StageResult;
}

export interface Visit {
  mrn: string;
  visit_date: string;
  visit_seq: number;
  s: string;
  o: string;
  a: string;
  p: string;
  dept?: string;
}

export interface HistoryResponse {
  mrn: string;
  visits: Visit[];
}

/** Error body contract: every non-2xx response carries {code, message}.
 * Network-level failures map to status 0 / code "network". */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}
