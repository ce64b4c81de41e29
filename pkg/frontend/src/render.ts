/** DOM rendering: one render(state) pass rebuilds the dynamic regions. */

import type { AppState } from "./state.js";
import { critiquedSet } from "./state.js";

export interface RenderTargets {
  banner: HTMLElement;
  toast: HTMLElement;
  step: HTMLElement;
  cards: HTMLElement;
  explanation: HTMLElement;
  timeline: HTMLElement;
  session: HTMLElement;
}

export function findTargets(root: Document | HTMLElement): RenderTargets {
  const get = (id: string) => {
    const el = root.querySelector<HTMLElement>(`#${id}`);
    if (!el) throw new Error(`missing #${id}`);
    return el;
  };
  return {
    banner: get("banner"),
    toast: get("toast"),
    step: get("step-indicator"),
    cards: get("cards"),
    explanation: get("explanation"),
    timeline: get("timeline"),
    session: get("session-panel"),
  };
}

function chip(label: string, opts: { disabled?: boolean; cls?: string } = {}) {
  const button = document.createElement("button");
  button.className = `chip ${opts.cls ?? ""}`.trim();
  button.textContent = label;
  button.dataset.keyphrase = label;
  if (opts.disabled) {
    button.disabled = true;
    button.classList.add("chip-disabled");
  }
  return button;
}

export function render(state: AppState, t: RenderTargets): void {
  t.banner.textContent = state.banner ?? "";
  t.banner.hidden = state.banner === null;
  t.toast.textContent = state.toast ?? "";
  t.toast.hidden = state.toast === null;

  if (!state.view) {
    t.session.hidden = true;
    t.cards.replaceChildren();
    t.explanation.replaceChildren();
    t.timeline.replaceChildren();
    t.step.textContent = "";
    return;
  }

  t.session.hidden = false;
  t.step.textContent = `step ${state.view.step}`;
  const used = critiquedSet(state);

  // cards in service order, never re-sorted client-side
  const cards = state.view.recommendations.map((rec, position) => {
    const card = document.createElement("article");
    card.className = "card";
    card.dataset.item = rec.item;
    const title = document.createElement("h3");
    title.textContent = `${position + 1}. ${rec.item}`;
    const score = document.createElement("span");
    score.className = "score";
    score.textContent = rec.score.toFixed(3);
    title.appendChild(score);
    card.appendChild(title);
    const row = document.createElement("div");
    row.className = "chip-row";
    for (const kp of rec.keyphrases) {
      row.appendChild(chip(kp, { disabled: used.has(kp) }));
    }
    card.appendChild(row);
    return card;
  });
  t.cards.replaceChildren(...cards);

  t.explanation.replaceChildren(
    ...state.view.explanation.map((kp) =>
      chip(kp, { disabled: used.has(kp), cls: "chip-explanation" }),
    ),
  );

  t.timeline.replaceChildren(
    ...state.timeline.map((entry) => {
      const item = document.createElement("li");
      item.textContent = `step ${entry.step}: critiqued "${entry.keyphrase}"`;
      return item;
    }),
  );
}
