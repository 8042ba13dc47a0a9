// View state for one annotation tab: exactly one active item at a time, the
// server is the source of truth for progress.

import type { Mode, Payload, PresentedItem, Summary } from "./api";

export type Phase = "loading" | "item" | "done" | "error";

export interface ViewState {
  sessionId: string;
  phase: Phase;
  mode: Mode | null;
  item: PresentedItem | null;
  answered: number;
  total: number;
  /** the annotator's current (unsubmitted) choice */
  selection: Payload | null;
  /** optimistic lock: a submission is on the wire */
  inFlight: boolean;
  /** retry banner text, shown after a network failure; selection survives */
  banner: string | null;
  summary: Summary | null;
  errorHint: string | null;
}

export function initialState(sessionId: string): ViewState {
  return {
    sessionId,
    phase: "loading",
    mode: null,
    item: null,
    answered: 0,
    total: 0,
    selection: null,
    inFlight: false,
    banner: null,
    summary: null,
    errorHint: null,
  };
}

/** Can the submit control be pressed right now? */
export function canSubmit(state: ViewState): boolean {
  return state.phase === "item" && state.selection !== null && !state.inFlight;
}

/** Is `payload` inside the domain the current mode accepts? The UI only ever
 * constructs payloads through this gate, so out-of-range submissions are
 * impossible by construction. */
export function validSelection(mode: Mode, payload: Payload): boolean {
  if (mode === "likert") {
    return typeof payload === "number" && Number.isInteger(payload) && payload >= 1 && payload <= 5;
  }
  if (mode === "preference") {
    return payload === "a" || payload === "b";
  }
  return payload === "correct" || payload === "incorrect";
}
