import { ApiError, HistoryResponse, TaskView } from "./types";

export interface SubmitForm {
  mrn: string;
  subjective: string;
  objective: string;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over fetch; one base URL is the only configuration. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      const message = err instanceof Error ? err.message : "network failure";
      throw new ApiError(0, "network", message);
    }
    const body = (await response.json().catch(() => ({}))) as Record<string, unknown>;
    if (!response.ok) {
      const code = typeof body.code === "string" ? body.code : "unknown";
      const message =
        typeof body.message === "string"
          ? body.message
          : `request failed with status ${response.status}`;
      throw new ApiError(response.status, code, message);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  /** Two-stage run: assessment then plan. Returns immediately with a task id. */
  submitPipeline(form: SubmitForm): Promise<{ task_id: string }> {
    return this.post("/api/v1/pipeline", form);
  }

  /** Plan-only run conditioned on a (possibly edited) assessment. */
  submitPlan(form: SubmitForm & { assessment: string }): Promise<{ task_id: string }> {
    return this.post("/api/v1/plan", form);
  }

  getTask(taskId: string): Promise<TaskView> {
    return this.request(`/api/v1/tasks/${encodeURIComponent(taskId)}`);
  }

  getHistory(mrn: string, limit = 100): Promise<HistoryResponse> {
    return this.request(
      `/api/v1/patients/${encodeURIComponent(mrn)}/history?limit=${limit}`,
    );
  }
}

export interface PollOptions {
  initialDelayMs?: number;
  maxDelayMs?: number;
  timeoutMs?: number;
  onUpdate?: (task: TaskView) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

/**
 * Poll a task until it is done or failed, starting at a 1 s interval and
 * doubling up to 10 s. Failed tasks are returned (not thrown) so callers
 * can surface the server's error code alongside any partial result.
 */
export async function pollTask(
  client: ApiClient,
  taskId: string,
  options: PollOptions = {},
): Promise<TaskView> {
  const maxDelay = options.maxDelayMs ?? 10_000;
  const timeout = options.timeoutMs ?? 300_000;
  const sleep = options.sleep ?? defaultSleep;
  const startedAt = Date.now();
  let delay = options.initialDelayMs ?? 1_000;
  for (;;) {
    await sleep(delay);
    const task = await client.getTask(taskId);
    options.onUpdate?.(task);
    if (task.status === "done" || task.status === "failed") {
      return task;
    }
    if (Date.now() - startedAt > timeout) {
      throw new ApiError(0, "poll_timeout", `task ${taskId} did not finish in time`);
    }
    delay = Math.min(delay * 2, maxDelay);
  }
}
