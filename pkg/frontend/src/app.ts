import { ApiClient, PollOptions, pollTask } from "./api";
import {
  HISTORY_PAGE_SIZE,
  renderHistoryPage,
  renderNotFound,
  renderReferencePanel,
} from "./render";
import { UiSession } from "./session";
import { ApiError, TaskStatus, Visit } from "./types";

export interface AppOptions {
  pollOptions?: PollOptions;
}

const LAYOUT = `
  <div id="banner" class="banner" hidden>
    <span id="banner-message"></span>
    <button id="banner-retry" type="button">Retry</button>
  </div>
  <main class="panels">
    <section id="case-panel" class="panel">
      <h2>Current case</h2>
      <label for="mrn-input">MRN</label>
      <input id="mrn-input" type="text" autocomplete="off" />
      <p id="mrn-error" class="field-error" hidden></p>
      <label for="subjective-input">Subjective</label>
      <textarea id="subjective-input" rows="4"></textarea>
      <p id="subjective-error" class="field-error" hidden></p>
      <label for="objective-input">Objective</label>
      <textarea id="objective-input" rows="4"></textarea>
      <p id="objective-error" class="field-error" hidden></p>
      <button id="submit-button" type="button">Generate assessment and plan</button>
      <span id="status-chip" class="chip" data-status="idle">idle</span>
    </section>
    <section id="result-panel" class="panel">
      <h2>Generated note</h2>
      <div id="assessment-block">
        <h3>Assessment <span id="dirty-badge" class="badge" hidden>edited</span></h3>
        <textarea id="assessment-text" rows="4" disabled></textarea>
        <p id="assessment-error" class="field-error" hidden></p>
        <button id="regenerate-button" type="button" disabled>Regenerate plan</button>
      </div>
      <div id="plan-block">
        <h3>Plan</h3>
        <p id="plan-text" class="plan-text"></p>
        <p id="plan-error" class="error" hidden></p>
      </div>
    </section>
    <section id="reference-panel" class="panel">
      <h2>References</h2>
      <div id="reference-content"><p class="empty">No references yet.</p></div>
      <h2>Patient history</h2>
      <form id="history-form">
        <label for="history-mrn">MRN</label>
        <input id="history-mrn" type="text" autocomplete="off" />
        <button id="history-load" type="submit">Load history</button>
      </form>
      <div id="history-content"></div>
      <nav id="history-pager" hidden>
        <button id="history-prev" type="button">Previous</button>
        <span id="history-page-label"></span>
        <button id="history-next" type="button">Next</button>
      </nav>
    </section>
  </main>
`;

export class App {
  readonly session = new UiSession();
  private historyVisits: Visit[] = [];
  private historyPage = 0;
  private retryAction: (() => void) | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ApiClient,
    private readonly options: AppOptions = {},
  ) {
    root.innerHTML = LAYOUT;
    this.bind();
  }

  private element<T extends HTMLElement>(id: string): T {
    const found = this.root.querySelector<T>(`#${id}`);
    if (!found) {
      throw new Error(`missing element #${id}`);
    }
    return found;
  }

  private bind(): void {
    this.element<HTMLButtonElement>("submit-button").addEventListener("click", () => {
      void this.submitCase();
    });
    this.element<HTMLTextAreaElement>("assessment-text").addEventListener(
      "input",
      (event) => {
        const value = (event.target as HTMLTextAreaElement).value;
        this.session.editAssessment(value);
        this.syncAssessmentControls();
      },
    );
    this.element<HTMLButtonElement>("regenerate-button").addEventListener(
      "click",
      () => {
        void this.regeneratePlan();
      },
    );
    this.element<HTMLFormElement>("history-form").addEventListener(
      "submit",
      (event) => {
        event.preventDefault();
        void this.loadHistory();
      },
    );
    this.element<HTMLButtonElement>("history-prev").addEventListener("click", () => {
      this.showHistoryPage(this.historyPage - 1);
    });
    this.element<HTMLButtonElement>("history-next").addEventListener("click", () => {
      this.showHistoryPage(this.historyPage + 1);
    });
    this.element<HTMLButtonElement>("banner-retry").addEventListener("click", () => {
      this.hideBanner();
      this.retryAction?.();
    });
  }

  // -- case submission -----------------------------------------------------

  private readForm(): { mrn: string; subjective: string; objective: string } {
    return {
      mrn: this.element<HTMLInputElement>("mrn-input").value.trim(),
      subjective: this.element<HTMLTextAreaElement>("subjective-input").value.trim(),
      objective: this.element<HTMLTextAreaElement>("objective-input").value.trim(),
    };
  }

  private fieldError(field: "mrn" | "subjective" | "objective" | "assessment", message: string): void {
    const node = this.element<HTMLParagraphElement>(`${field}-error`);
    node.textContent = message;
    node.hidden = false;
  }

  private clearFieldErrors(): void {
    for (const field of ["mrn", "subjective", "objective", "assessment"]) {
      this.element<HTMLParagraphElement>(`${field}-error`).hidden = true;
    }
  }

  private setStatus(status: TaskStatus | "idle" | "submitting"): void {
    const chip = this.element<HTMLSpanElement>("status-chip");
    chip.textContent = status;
    chip.dataset.status = status;
    if (status !== "submitting" && status !== "idle") {
      this.session.status = status;
    }
  }

  private setInFlight(inFlight: boolean): void {
    this.session.inFlight = inFlight;
    this.element<HTMLButtonElement>("submit-button").disabled = inFlight;
    this.syncAssessmentControls();
  }

  async submitCase(): Promise<void> {
    if (this.session.inFlight) {
      return;
    }
    this.clearFieldErrors();
    this.hideBanner();
    const form = this.readForm();
    let valid = true;
    if (!form.mrn) {
      this.fieldError("mrn", "enter the patient MRN");
      valid = false;
    }
    if (!form.subjective) {
      this.fieldError("subjective", "enter the subjective findings");
      valid = false;
    }
    if (!form.objective) {
      this.fieldError("objective", "enter the objective findings");
      valid = false;
    }
    if (!valid) {
      return;
    }
    this.session.mrn = form.mrn;
    this.session.draftSubjective = form.subjective;
    this.session.draftObjective = form.objective;
    this.setInFlight(true);
    this.setStatus("submitting");
    try {
      const { task_id } = await this.client.submitPipeline(form);
      this.session.taskId = task_id;
      this.setStatus("pending");
      const task = await pollTask(this.client, task_id, {
        ...this.options.pollOptions,
        onUpdate: (update) => this.setStatus(update.status),
      });
      if (task.status === "done" && task.result) {
        this.session.applyPipelineResult(task.result);
        this.renderResult();
      } else {
        if (task.partial) {
          this.session.applyPartialAssessment(task.partial);
        }
        this.renderResult();
        this.showPlanError(task.error ?? "task failed");
      }
    } catch (err) {
      this.setStatus("idle");
      this.handleApiError(err, () => void this.submitCase());
    } finally {
      this.setInFlight(false);
    }
  }

  // -- assessment editing and plan regeneration -----------------------------

  private syncAssessmentControls(): void {
    this.element<HTMLSpanElement>("dirty-badge").hidden = !this.session.assessmentDirty;
    this.element<HTMLButtonElement>("regenerate-button").disabled =
      !this.session.canRegenerate;
  }

  async regeneratePlan(): Promise<void> {
    if (!this.session.canRegenerate) {
      return;
    }
    const assessment = (this.session.assessment ?? "").trim();
    if (!assessment) {
      this.fieldError("assessment", "assessment must not be empty");
      return;
    }
    this.clearFieldErrors();
    this.hideBanner();
    this.setInFlight(true);
    this.setStatus("submitting");
    try {
      const { task_id } = await this.client.submitPlan({
        mrn: this.session.mrn,
        subjective: this.session.draftSubjective,
        objective: this.session.draftObjective,
        assessment,
      });
      this.session.taskId = task_id;
      this.setStatus("pending");
      const task = await pollTask(this.client, task_id, {
        ...this.options.pollOptions,
        onUpdate: (update) => this.setStatus(update.status),
      });
      if (task.status === "done" && task.result) {
        this.session.applyPlanResult(task.result);
        this.renderResult();
      } else {
        this.showPlanError(task.error ?? "task failed");
      }
    } catch (err) {
      this.setStatus("idle");
      this.handleApiError(err, () => void this.regeneratePlan());
    } finally {
      this.setInFlight(false);
    }
  }

  // -- rendering -------------------------------------------------------------

  private renderResult(): void {
    const assessmentNode = this.element<HTMLTextAreaElement>("assessment-text");
    assessmentNode.value = this.session.assessment ?? "";
    assessmentNode.disabled = this.session.assessment === null;
    this.element<HTMLParagraphElement>("plan-text").textContent =
      this.session.planView?.text ?? "";
    this.element<HTMLParagraphElement>("plan-error").hidden = true;
    this.element<HTMLDivElement>("reference-content").innerHTML =
      renderReferencePanel(this.session.references);
    this.syncAssessmentControls();
  }

  private showPlanError(message: string): void {
    const node = this.element<HTMLParagraphElement>("plan-error");
    node.textContent = message;
    node.hidden = false;
  }

  private handleApiError(err: unknown, retry: () => void): void {
    if (err instanceof ApiError && err.status === 400) {
      const byCode: Record<string, "mrn" | "subjective" | "objective" | "assessment"> = {
        mrn_missing: "mrn",
        subjective_too_short: "subjective",
        objective_too_short: "objective",
        assessment_too_short: "assessment",
      };
      const field = byCode[err.code];
      if (field) {
        this.fieldError(field, err.message);
        return;
      }
    }
    if (err instanceof ApiError && err.status === 404) {
      this.fieldError("mrn", err.message);
      return;
    }
    const message =
      err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
    this.showBanner(message, retry);
  }

  private showBanner(message: string, retry: (() => void) | null): void {
    this.retryAction = retry;
    this.element<HTMLSpanElement>("banner-message").textContent = message;
    this.element<HTMLButtonElement>("banner-retry").hidden = retry === null;
    this.element<HTMLDivElement>("banner").hidden = false;
  }

  private hideBanner(): void {
    this.element<HTMLDivElement>("banner").hidden = true;
  }

  // -- history timeline -------------------------------------------------------

  async loadHistory(): Promise<void> {
    const mrn = this.element<HTMLInputElement>("history-mrn").value.trim();
    if (!mrn) {
      return;
    }
    const content = this.element<HTMLDivElement>("history-content");
    try {
      const history = await this.client.getHistory(mrn);
      this.historyVisits = history.visits;
      this.showHistoryPage(0);
    } catch (err) {
      this.historyVisits = [];
      this.element<HTMLElement>("history-pager").hidden = true;
      if (err instanceof ApiError && err.status === 404) {
        content.innerHTML = renderNotFound(mrn);
        return;
      }
      this.handleApiError(err, () => void this.loadHistory());
    }
  }

  private showHistoryPage(page: number): void {
    const rendered = renderHistoryPage(this.historyVisits, page);
    this.historyPage = rendered.page;
    this.element<HTMLDivElement>("history-content").innerHTML = rendered.html;
    const pager = this.element<HTMLElement>("history-pager");
    pager.hidden = this.historyVisits.length <= HISTORY_PAGE_SIZE;
    this.element<HTMLSpanElement>("history-page-label").textContent =
      `Page ${rendered.page + 1} of ${rendered.pageCount}`;
    this.element<HTMLButtonElement>("history-prev").disabled = rendered.page === 0;
    this.element<HTMLButtonElement>("history-next").disabled =
      rendered.page >= rendered.pageCount - 1;
  }
}

export function createApp(
  root: HTMLElement,
  client: ApiClient,
  options: AppOptions = {},
): App {
  return new App(root, client, options);
}
