// Typed client for the annotation service JSON API.

export type Mode = "likert" | "preference" | "triage";

export interface PresentedItem {
  item_id: string;
  audio_url: string;
  texts: Record<string, string>;
}

export interface NextItemResponse {
  done: boolean;
  mode: Mode;
  item?: PresentedItem;
  index?: number;
  answered?: number;
  total: number;
}

export interface Summary {
  mode: Mode;
  n_items: number;
  n_answered: number;
  likert_mean?: number | null;
  likert_histogram?: Record<string, number> | null;
  preference_rate?: number | null;
  correct_rate?: number | null;
}

export type Payload = number | "a" | "b" | "correct" | "incorrect";

export interface SubmitResponse {
  accepted: boolean;
  summary: Summary;
}

export interface SessionItemSpec {
  item_id: string;
  audio_url: string;
  texts: Record<string, string>;
}

/** Server-reported failure; `code` mirrors the API's error codes. */
export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function requestJson<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, init);
  const text = await response.text();
  let doc: any = null;
  try {
    doc = text ? JSON.parse(text) : null;
  } catch {
    // fall through: non-JSON body on an error status
  }
  if (!response.ok) {
    const code = doc?.code ?? "http_error";
    const message = doc?.message ?? `HTTP ${response.status}`;
    throw new ApiError(response.status, code, message);
  }
  return doc as T;
}

export class AnnotateApi {
  constructor(private base: string = "") {}

  createSession(mode: Mode, items: SessionItemSpec[], seed: number): Promise<{ session_id: string }> {
    return requestJson(`${this.base}/api/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ mode, items, seed }),
    });
  }

  nextItem(sessionId: string): Promise<NextItemResponse> {
    return requestJson(`${this.base}/api/sessions/${sessionId}/next`);
  }

  submitResponse(sessionId: string, itemId: string, payload: Payload): Promise<SubmitResponse> {
    return requestJson(`${this.base}/api/sessions/${sessionId}/responses`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ item_id: itemId, payload }),
    });
  }

  summary(sessionId: string): Promise<Summary> {
    return requestJson(`${this.base}/api/sessions/${sessionId}/summary`);
  }
}
