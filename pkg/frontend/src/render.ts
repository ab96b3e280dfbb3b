// HTML renderers, pure string -> string so the contracts are testable
// without a DOM. main.ts assigns the output into the page.

import type { SourceCard } from "./api.js";
import type { ChatTurn } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function cardMeta(card: SourceCard): string {
  const course = card.chunk_id.split("-")[0];
  const where = card.page_number !== undefined ? `p.${card.page_number}` : card.kind;
  return `${escapeHtml(course)} · ${escapeHtml(where)} · ${card.score.toFixed(4)}`;
}

/** Slide-image card (multimodal) or snippet card (text retrieval). */
export function renderSourceCard(card: SourceCard, multimodal: boolean): string {
  const meta = `<div class="card-meta">${cardMeta(card)}</div>`;
  if (multimodal && card.image_url) {
    const alt = card.snippet ? card.snippet : `slide ${card.page_number ?? ""}`;
    return (
      `<figure class="source-card image-card" data-chunk="${escapeHtml(card.chunk_id)}">` +
      `<img src="${escapeHtml(card.image_url)}" alt="${escapeHtml(alt)}" loading="lazy">` +
      meta +
      `</figure>`
    );
  }
  return (
    `<figure class="source-card text-card" data-chunk="${escapeHtml(card.chunk_id)}">` +
    `<blockquote>${escapeHtml(card.snippet)}</blockquote>` +
    meta +
    `</figure>`
  );
}

export function renderEvidencePanel(turn: ChatTurn): string {
  if (turn.state !== "done" || turn.sources.length === 0) return "";
  const multimodal = turn.mode === "multimodal_rag";
  const cards = turn.sources.map((card) => renderSourceCard(card, multimodal)).join("");
  return `<aside class="evidence" aria-label="retrieved evidence">${cards}</aside>`;
}

export function renderTurn(turn: ChatTurn, index: number): string {
  const answer =
    turn.state === "error"
      ? `<div class="answer error">` +
        `<p>${escapeHtml(turn.error ?? "request failed")}</p>` +
        `<button class="retry" data-turn="${index}">Retry</button>` +
        `</div>`
      : `<div class="answer${turn.state === "streaming" || turn.state === "pending" ? " streaming" : ""}">` +
        `${escapeHtml(turn.answer)}` +
        (turn.state === "pending" ? `<span class="cursor">…</span>` : "") +
        `</div>`;
  return (
    `<section class="turn state-${turn.state}" data-turn="${index}">` +
    `<div class="question">${escapeHtml(turn.question)}</div>` +
    answer +
    renderEvidencePanel(turn) +
    `</section>`
  );
}

export function renderSession(turns: ChatTurn[]): string {
  return turns.map(renderTurn).join("");
}
