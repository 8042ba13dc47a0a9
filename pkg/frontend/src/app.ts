// The annotation single-page app: play the audio, read the caption(s),
// pick a judgment, submit, advance. Vanilla DOM, no framework.

import { AnnotateApi, ApiError, Payload } from "./api";
import { ViewState, canSubmit, initialState, validSelection } from "./state";

export const LIKERT_GUIDELINES: Record<number, string> = {
  1: "Completely different meanings with no semantic overlap.",
  2: "Shares some similar words but conveys a different overall meaning.",
  3: "Common topic but differs in details or emphasis.",
  4: "Largely similar meanings with minor variation in detail.",
  5: "The core information being conveyed is same.",
};

const TRIAGE_KEYS: Record<string, Payload> = { y: "correct", n: "incorrect" };

export class AnnotateApp {
  state: ViewState;
  private audio: HTMLAudioElement | null = null;
  private keyHandler = (event: KeyboardEvent) => this.onKey(event);

  constructor(
    private root: HTMLElement,
    private api: AnnotateApi,
    sessionId: string,
  ) {
    this.state = initialState(sessionId);
  }

  async start(): Promise<void> {
    document.addEventListener("keydown", this.keyHandler);
    if (!this.state.sessionId) {
      this.state.phase = "error";
      this.state.errorHint = "missing session id: open this page as /?session=<id>";
      this.render();
      return;
    }
    await this.loadNext();
  }

  destroy(): void {
    document.removeEventListener("keydown", this.keyHandler);
  }

  // -- data flow --

  async loadNext(): Promise<void> {
    this.state.banner = null;
    try {
      const next = await this.api.nextItem(this.state.sessionId);
      if (next.done) {
        this.state.phase = "done";
        this.state.item = null;
        this.state.answered = next.total;
        this.state.total = next.total;
        this.state.summary = await this.api.summary(this.state.sessionId);
      } else {
        this.state.phase = "item";
        this.state.mode = next.mode;
        this.state.item = next.item ?? null;
        this.state.answered = next.answered ?? 0;
        this.state.total = next.total;
        this.state.selection = null;
        this.state.inFlight = false;
      }
      this.render();
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        this.state.phase = "error";
        this.state.errorHint = `session "${this.state.sessionId}" was not found - check the id in the page URL`;
        this.render();
      } else {
        this.state.banner = "Could not reach the server. Your progress is saved server-side.";
        this.render();
      }
    }
  }

  select(payload: Payload): void {
    if (this.state.phase !== "item" || this.state.inFlight || !this.state.mode) return;
    if (!validSelection(this.state.mode, payload)) return;
    this.state.selection = payload;
    this.updateControls();
  }

  async submit(): Promise<void> {
    if (!canSubmit(this.state)) return;
    const item = this.state.item!;
    const payload = this.state.selection!;
    this.state.inFlight = true;
    this.state.banner = null;
    this.updateControls();
    try {
      await this.api.submitResponse(this.state.sessionId, item.item_id, payload);
      this.state.inFlight = false;
      await this.loadNext();
    } catch (err) {
      this.state.inFlight = false;
      if (err instanceof ApiError && err.code === "duplicate_response") {
        // already answered (stale tab or a retried request): resync
        await this.loadNext();
      } else if (err instanceof ApiError) {
        this.state.banner = `The server rejected the submission: ${err.message}`;
        this.render();
      } else {
        // network failure: keep the selection, offer a retry
        this.state.banner = "Could not reach the server - your selection is kept.";
        this.render();
      }
    }
  }

  // -- input --

  private onKey(event: KeyboardEvent): void {
    if (event.key === " ") {
      event.preventDefault();
      this.togglePlayback();
      return;
    }
    if (this.state.phase !== "item" || !this.state.mode) return;
    if (event.key === "Enter") {
      void this.submit();
      return;
    }
    const key = event.key.toLowerCase();
    if (this.state.mode === "likert" && /^[1-5]$/.test(key)) {
      this.select(Number(key));
    } else if (this.state.mode === "preference" && (key === "a" || key === "b")) {
      this.select(key);
    } else if (this.state.mode === "triage" && key in TRIAGE_KEYS) {
      this.select(TRIAGE_KEYS[key]);
    }
  }

  togglePlayback(): void {
    if (!this.audio) return;
    try {
      if (this.audio.paused) {
        const p = this.audio.play();
        if (p && typeof p.catch === "function") p.catch(() => undefined);
      } else {
        this.audio.pause();
      }
    } catch {
      // media playback unavailable (headless test environments)
    }
  }

  // -- rendering --

  render(): void {
    const { state } = this;
    this.root.textContent = "";
    this.audio = null;
    const shell = el("div", "shell");

    if (state.phase === "loading") {
      shell.append(el("p", "status", "Loading..."));
    } else if (state.phase === "error") {
      const box = el("div", "error-box");
      box.append(el("h2", "", "Session unavailable"));
      box.append(el("p", "error-hint", state.errorHint ?? "unknown error"));
      shell.append(box);
    } else if (state.phase === "done") {
      shell.append(this.renderDone());
    } else if (state.phase === "item" && state.item) {
      shell.append(this.renderItem());
    }

    if (state.banner) {
      const banner = el("div", "banner");
      banner.append(el("span", "banner-text", state.banner));
      const retry = el("button", "retry-button", "Retry") as HTMLButtonElement;
      retry.addEventListener("click", () => {
        if (state.phase === "item" && state.selection !== null) {
          void this.submit();
        } else {
          void this.loadNext();
        }
      });
      banner.append(retry);
      shell.append(banner);
    }
    this.root.append(shell);
  }

  private renderDone(): HTMLElement {
    const box = el("div", "done-box");
    box.append(el("h2", "", "Session complete"));
    box.append(el("p", "", `Thanks - all ${this.state.total} items are answered.`));
    const summary = this.state.summary;
    if (summary) {
      const list = el("dl", "summary");
      const rows: Array<[string, string]> = [["Answered", `${summary.n_answered} / ${summary.n_items}`]];
      if (summary.likert_mean != null) {
        rows.push(["Mean rating", summary.likert_mean.toFixed(2)]);
      }
      if (summary.preference_rate != null) {
        rows.push(["Preference rate", `${(summary.preference_rate * 100).toFixed(1)}%`]);
      }
      if (summary.correct_rate != null) {
        rows.push(["Judged correct", `${(summary.correct_rate * 100).toFixed(1)}%`]);
      }
      for (const [label, value] of rows) {
        list.append(el("dt", "", label));
        list.append(el("dd", "", value));
      }
      box.append(list);
    }
    return box;
  }

  private renderItem(): HTMLElement {
    const { item, mode, answered, total } = this.state;
    const main = el("div", "item");

    const header = el("header", "progress");
    header.append(el("span", "progress-count", `Item ${answered + 1} of ${total}`));
    main.append(header);

    this.audio = document.createElement("audio");
    this.audio.controls = true;
    this.audio.preload = "auto";
    this.audio.src = item!.audio_url;
    this.audio.className = "player";
    main.append(this.audio);
    const hint = el("p", "hint", "space = play/pause");
    main.append(hint);

    if (mode === "likert") {
      main.append(textBlock("Original caption", item!.texts.original));
      main.append(textBlock("Paraphrase", item!.texts.paraphrase));
      main.append(this.likertControls());
      hint.textContent = "keys: 1-5 to rate, Enter to submit, space = play/pause";
    } else if (mode === "preference") {
      main.append(el("p", "prompt", "Which caption describes the audio better?"));
      main.append(this.preferenceControls());
      hint.textContent = "keys: A / B to choose, Enter to submit, space = play/pause";
    } else {
      main.append(textBlock("Query", item!.texts.query));
      main.append(textBlock("Retrieved audio description", item!.texts.retrieved_description));
      main.append(this.triageControls());
      hint.textContent = "keys: Y = correct, N = incorrect, Enter to submit, space = play/pause";
    }

    const submit = el("button", "submit", "Submit") as HTMLButtonElement;
    submit.id = "submit";
    submit.addEventListener("click", () => void this.submit());
    main.append(submit);
    this.updateControls(main);
    return main;
  }

  private likertControls(): HTMLElement {
    const row = el("div", "controls likert");
    for (let score = 1; score <= 5; score++) {
      const button = el("button", "choice likert-button", String(score)) as HTMLButtonElement;
      button.dataset.payload = String(score);
      button.title = LIKERT_GUIDELINES[score];
      button.addEventListener("click", () => this.select(score));
      row.append(button);
    }
    return row;
  }

  private preferenceControls(): HTMLElement {
    const row = el("div", "controls preference");
    for (const side of ["a", "b"] as const) {
      // neutral markup on purpose: nothing in the DOM may reveal which side
      // holds the corrected caption
      const card = el("button", "choice choice-card") as HTMLButtonElement;
      card.dataset.payload = side;
      card.append(el("span", "card-key", side.toUpperCase()));
      card.append(el("span", "card-text", this.state.item!.texts[side]));
      card.addEventListener("click", () => this.select(side));
      row.append(card);
    }
    return row;
  }

  private triageControls(): HTMLElement {
    const row = el("div", "controls triage");
    for (const verdict of ["correct", "incorrect"] as const) {
      const button = el("button", "choice triage-button", verdict) as HTMLButtonElement;
      button.dataset.payload = verdict;
      button.addEventListener("click", () => this.select(verdict));
      row.append(button);
    }
    return row;
  }

  /** Patch selection highlights and the submit lock without rebuilding the
   * DOM (a rebuild would reset audio playback). */
  updateControls(scope?: HTMLElement): void {
    const rootEl = scope ?? this.root;
    const selected = this.state.selection;
    rootEl.querySelectorAll<HTMLButtonElement>(".choice").forEach((button) => {
      const mine =
        selected !== null &&
        button.dataset.payload === (typeof selected === "number" ? String(selected) : selected);
      button.classList.toggle("selected", mine);
      button.disabled = this.state.inFlight;
      button.setAttribute("aria-pressed", mine ? "true" : "false");
    });
    const submit = rootEl.querySelector<HTMLButtonElement>("#submit");
    if (submit) {
      submit.disabled = !canSubmit(this.state);
      submit.textContent = this.state.inFlight ? "Submitting..." : "Submit";
    }
  }
}

function el(tag: string, className = "", text = ""): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function textBlock(label: string, body: string | undefined): HTMLElement {
  const block = el("section", "text-block");
  block.append(el("h3", "text-label", label));
  block.append(el("p", "text-body", body ?? ""));
  return block;
}

export function startApp(root: HTMLElement, api: AnnotateApi, sessionId: string): AnnotateApp {
  const app = new AnnotateApp(root, api, sessionId);
  void app.start();
  return app;
}
