/** Client session state: the last service response plus the local
 * critique timeline. The rendered view is a pure function of this state;
 * ordering always comes verbatim from the service. */

import type { SessionView } from "./api.js";

export interface TimelineEntry {
  step: number;
  keyphrase: string;
}

export interface AppState {
  view: SessionView | null;
  timeline: TimelineEntry[];
  banner: string | null;
  toast: string | null;
  busy: boolean;
}

export function initialState(): AppState {
  return { view: null, timeline: [], banner: null, toast: null, busy: false };
}

/** Replace the view after a session create or rehydration. */
export function sessionStarted(state: AppState, view: SessionView): AppState {
  const timeline = view.critiques.map((keyphrase, i) => ({
    step: i + 1,
    keyphrase,
  }));
  return { ...state, view, timeline, banner: null, toast: null };
}

/** Fold in the response to a critique request. */
export function critiqueApplied(state: AppState, view: SessionView): AppState {
  const last = view.critiques[view.critiques.length - 1];
  const timeline =
    last === undefined
      ? state.timeline
      : [...state.timeline, { step: view.step, keyphrase: last }];
  return { ...state, view, timeline, toast: null };
}

export function sessionClosed(state: AppState): AppState {
  return initialState();
}

export function critiquedSet(state: AppState): Set<string> {
  return new Set(state.view?.critiques ?? []);
}

export function withBanner(state: AppState, message: string): AppState {
  return { ...state, banner: message };
}

export function withToast(state: AppState, message: string): AppState {
  return { ...state, toast: message };
}
