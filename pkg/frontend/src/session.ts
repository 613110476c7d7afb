import { StageResult, StageView, TaskStatus } from "./types";

/**
 * Client-side state for one case panel: the drafted S/O, the displayed
 * assessment (generated or edited), the current plan, the active task, and
 * the reference panel contents from the latest completed task.
 */
export class UiSession {
  mrn = "";
  draftSubjective = "";
  draftObjective = "";
  taskId: string | null = null;
  status: TaskStatus | "idle" = "idle";
  inFlight = false;

  assessmentView: StageView | null = null;
  planView: StageView | null = null;
  references: StageResult = {};

  private generatedAssessment: string | null = null;
  private displayedAssessment: string | null = null;

  get assessment(): string | null {
    return this.displayedAssessment;
  }

  /** Dirty exactly when the displayed assessment differs from the last
   * generated one. */
  get assessmentDirty(): boolean {
    return (
      this.displayedAssessment !== null &&
      this.generatedAssessment !== null &&
      this.displayedAssessment !== this.generatedAssessment
    );
  }

  /** Plan regeneration needs a non-empty assessment and no task in flight. */
  get canRegenerate(): boolean {
    return (
      !this.inFlight &&
      this.displayedAssessment !== null &&
      this.displayedAssessment.trim().length > 0
    );
  }

  editAssessment(text: string): void {
    this.displayedAssessment = text;
  }

  /** A finished two-stage run replaces assessment, plan, and references. */
  applyPipelineResult(result: StageResult): void {
    this.assessmentView = result.assessment ?? null;
    this.planView = result.plan ?? null;
    this.generatedAssessment = result.assessment?.text ?? null;
    this.displayedAssessment = this.generatedAssessment;
    this.references = result;
  }

  /** A stage-2-only failure still yields the generated assessment. */
  applyPartialAssessment(partial: StageResult): void {
    const view = partial.assessment ?? null;
    this.assessmentView = view;
    this.planView = null;
    this.generatedAssessment = view?.text ?? null;
    this.displayedAssessment = this.generatedAssessment;
    this.references = view ? { assessment: view } : {};
  }

  /** A regenerated plan keeps the displayed (possibly edited) assessment
   * that produced it; the reference panel refreshes to the new task's. */
  applyPlanResult(result: StageResult): void {
    this.planView = result.plan ?? null;
    this.references = result;
  }
}
