// Typed client for the annotation service JSON API. The server is the only
// source of truth: the client never reorders slots or caches ratings.

export interface SessionSummary {
  session_id: string;
  dataset_tag: string;
  n_items: number;
}

export interface ItemView {
  item_id: string;
  entity_display: string;
  context: string[];
  criteria: string[];
  criterion_prompts: Record<string, string>;
  slots: string[];
  image_urls: Record<string, string>;
  status: Record<string, boolean>;
}

export interface SessionItems {
  session_id: string;
  dataset_tag: string;
  items: ItemView[];
}

export interface CriterionProgress {
  done: number;
  total: number;
}

export interface Progress {
  session_id: string;
  annotator_id: string;
  per_criterion: Record<string, CriterionProgress>;
  done: number;
  total: number;
}

export interface RatingPayload {
  session_id: string;
  annotator_id: string;
  item_id: string;
  criterion: string;
  ranking: Record<string, number>;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, init);
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class AnnotationApi {
  constructor(private readonly base: string = "") {}

  listSessions(): Promise<SessionSummary[]> {
    return request(`${this.base}/sessions`);
  }

  sessionItems(sessionId: string, annotator: string): Promise<SessionItems> {
    const q = encodeURIComponent(annotator);
    return request(`${this.base}/sessions/${sessionId}/items?annotator=${q}`);
  }

  item(itemId: string, annotator: string): Promise<ItemView> {
    const q = encodeURIComponent(annotator);
    return request(`${this.base}/items/${itemId}?annotator=${q}`);
  }

  progress(sessionId: string, annotator: string): Promise<Progress> {
    const q = encodeURIComponent(annotator);
    return request(`${this.base}/sessions/${sessionId}/progress?annotator=${q}`);
  }

  submitRating(payload: RatingPayload): Promise<{ status: string }> {
    return request(`${this.base}/ratings`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  resultsUrl(sessionId: string): string {
    return `${this.base}/sessions/${sessionId}/results`;
  }

  imageUrl(urlFromServer: string): string {
    return `${this.base}${urlFromServer}`;
  }
}
