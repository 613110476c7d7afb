import { StageResult, StageView, Visit } from "./types";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function referenceGroup(title: string, view: StageView): string {
  const history = view.self_history.length
    ? view.self_history
        .map((id) => `<li class="history-ref">${escapeHtml(id)}</li>`)
        .join("")
    : '<li class="empty">(none)</li>';
  const cross = view.cross_patient.length
    ? view.cross_patient
        .map(
          (ref) =>
            `<li class="cross-ref">${escapeHtml(ref.doc_id)}` +
            ` <span class="score">${ref.score.toFixed(3)}</span></li>`,
        )
        .join("")
    : '<li class="empty">(none)</li>';
  return `
    <div class="reference-group" data-stage="${escapeHtml(view.stage)}">
      <h3>${escapeHtml(title)}</h3>
      <h4>Own prior visits</h4>
      <ul class="self-history">${history}</ul>
      <h4>Similar cases</h4>
      <ul class="cross-patient">${cross}</ul>
    </div>
  `;
}

/** Reference panel for the latest completed task's stage views. */
export function renderReferencePanel(references: StageResult): string {
  const groups: string[] = [];
  if (references.assessment) {
    groups.push(referenceGroup("Assessment references", references.assessment));
  }
  if (references.plan) {
    groups.push(referenceGroup("Plan references", references.plan));
  }
  if (!groups.length) {
    return '<p class="empty">No references yet.</p>';
  }
  return groups.join("");
}

export const HISTORY_PAGE_SIZE = 10;

function visitCard(visit: Visit): string {
  const sections: Array<[string, string]> = [
    ["Subjective", visit.s],
    ["Objective", visit.o],
    ["Assessment", visit.a],
    ["Plan", visit.p],
  ];
  const body = sections
    .map(
      ([label, text]) => `
        <details>
          <summary>${label}</summary>
          <p>${escapeHtml(text)}</p>
        </details>
      `,
    )
    .join("");
  return `
    <article class="visit-card" data-seq="${visit.visit_seq}">
      <h4>Visit ${visit.visit_seq} — ${escapeHtml(visit.visit_date)}</h4>
      ${body}
    </article>
  `;
}

export interface HistoryPage {
  html: string;
  page: number;
  pageCount: number;
}

/** One page of the newest-first visit timeline, ten visits per page. */
export function renderHistoryPage(visits: Visit[], page: number): HistoryPage {
  const pageCount = Math.max(1, Math.ceil(visits.length / HISTORY_PAGE_SIZE));
  const clamped = Math.min(Math.max(page, 0), pageCount - 1);
  const start = clamped * HISTORY_PAGE_SIZE;
  const shown = visits.slice(start, start + HISTORY_PAGE_SIZE);
  const html = shown.length
    ? shown.map(visitCard).join("")
    : '<p class="empty">No visits recorded.</p>';
  return { html, page: clamped, pageCount };
}

export function renderNotFound(mrn: string): string {
  return `<p class="not-found">No history found for ${escapeHtml(mrn)}.</p>`;
}
