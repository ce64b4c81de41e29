/** Typed client for the session service JSON API. */

export interface RecommendationCard {
  item: string;
  score: number;
  keyphrases: string[];
}

export interface SessionView {
  session_id: string;
  step: number;
  closed: boolean;
  recommendations: RecommendationCard[];
  explanation: string[];
  critiques: string[];
}

export interface KeyphraseEntry {
  index: number;
  label: string;
}

export interface CreateSessionBody {
  user_id?: string;
  seed_keyphrases?: string[];
  seed_items?: string[];
  top_n?: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(path, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    throw new ApiError(
      resp.status,
      (body as { code?: string }).code ?? "error",
      (body as { message?: string }).message ?? resp.statusText,
    );
  }
  return body as T;
}

export function createSession(body: CreateSessionBody): Promise<SessionView> {
  return request("/sessions", { method: "POST", body: JSON.stringify(body) });
}

export function getSession(sessionId: string): Promise<SessionView> {
  return request(`/sessions/${encodeURIComponent(sessionId)}`);
}

export function deleteSession(sessionId: string): Promise<unknown> {
  return request(`/sessions/${encodeURIComponent(sessionId)}`, { method: "DELETE" });
}

export function critiqueKeyphrase(
  sessionId: string,
  keyphrase: string,
): Promise<SessionView> {
  return request(`/sessions/${encodeURIComponent(sessionId)}/critiques`, {
    method: "POST",
    body: JSON.stringify({ keyphrase }),
  });
}

export function listKeyphrases(): Promise<{ keyphrases: KeyphraseEntry[] }> {
  return request("/keyphrases");
}
