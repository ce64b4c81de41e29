/** Wiring: event handlers, one in-flight request per session (rapid
 * clicks are queued), rehydration from the session id in the URL hash. */

import {
  ApiError,
  createSession,
  critiqueKeyphrase,
  deleteSession,
  getSession,
  listKeyphrases,
} from "./api.js";
import { findTargets, render } from "./render.js";
import {
  AppState,
  critiqueApplied,
  initialState,
  sessionClosed,
  sessionStarted,
  withBanner,
  withToast,
} from "./state.js";

let state: AppState = initialState();
let queue: Promise<void> = Promise.resolve();

/** Settles once queued requests so far have finished (used by tests). */
export function idle(): Promise<void> {
  return queue;
}

export function setup(doc: Document): void {
  state = initialState();
  queue = Promise.resolve();
  const targets = findTargets(doc);
  const userInput = doc.querySelector<HTMLInputElement>("#user-id")!;
  const seedRow = doc.querySelector<HTMLElement>("#seed-keyphrases")!;
  const startButton = doc.querySelector<HTMLButtonElement>("#start")!;
  const resetButton = doc.querySelector<HTMLButtonElement>("#reset")!;
  const selectedSeeds = new Set<string>();

  const paint = () => {
    startButton.disabled =
      userInput.value.trim() === "" && selectedSeeds.size === 0;
    render(state, targets);
  };

  const update = (next: AppState) => {
    state = next;
    paint();
  };

  const enqueue = (work: () => Promise<void>) => {
    queue = queue.then(work, work);
  };

  userInput.addEventListener("input", paint);

  enqueue(async () => {
    try {
      const { keyphrases } = await listKeyphrases();
      for (const { label } of keyphrases) {
        const chip = doc.createElement("button");
        chip.className = "chip chip-seed";
        chip.textContent = label;
        chip.addEventListener("click", () => {
          if (selectedSeeds.delete(label)) {
            chip.classList.remove("chip-selected");
          } else {
            selectedSeeds.add(label);
            chip.classList.add("chip-selected");
          }
          paint();
        });
        seedRow.appendChild(chip);
      }
    } catch (err) {
      update(withBanner(state, describe(err)));
    }
  });

  startButton.addEventListener("click", () =>
    enqueue(async () => {
      try {
        const body =
          userInput.value.trim() !== ""
            ? { user_id: userInput.value.trim() }
            : { seed_keyphrases: [...selectedSeeds] };
        const view = await createSession(body);
        doc.location.hash = view.session_id;
        update(sessionStarted(initialState(), view));
      } catch (err) {
        update(withBanner(state, describe(err)));
      }
    }),
  );

  resetButton.addEventListener("click", () =>
    enqueue(async () => {
      const current = state.view;
      if (current) await deleteSession(current.session_id).catch(() => undefined);
      doc.location.hash = "";
      update(sessionClosed(state));
    }),
  );

  targets.cards.addEventListener("click", (event) => onChip(event));
  targets.explanation.addEventListener("click", (event) => onChip(event));

  const onChip = (event: Event) => {
    const target = event.target as HTMLElement | null;
    const keyphrase = target?.dataset?.keyphrase;
    if (!keyphrase || (target as HTMLButtonElement).disabled) return;
    enqueue(async () => {
      const view = state.view;
      if (!view) return;
      try {
        const next = await critiqueKeyphrase(view.session_id, keyphrase);
        update(critiqueApplied(state, next));
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          update(withToast(state, err.message)); // view unchanged
        } else {
          update(withBanner(state, describe(err)));
        }
      }
    });
  };

  // refresh mid-session: rehydrate the view from the service
  const sessionId = doc.location.hash.replace(/^#/, "");
  if (sessionId) {
    enqueue(async () => {
      try {
        update(sessionStarted(initialState(), await getSession(sessionId)));
      } catch {
        doc.location.hash = "";
      }
    });
  }

  paint();
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.code}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

const hasAppRoot = () =>
  typeof document !== "undefined" && document.querySelector("#start-panel") !== null;

if (typeof document !== "undefined") {
  if (document.readyState !== "loading") {
    if (hasAppRoot()) setup(document);
  } else {
    document.addEventListener("DOMContentLoaded", () => {
      if (hasAppRoot()) setup(document);
    });
  }
}
