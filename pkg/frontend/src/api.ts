// Typed client for the 2AFC study service.
//
// The server never says which side holds the original before the session
// report; trial payloads only carry opaque left/right image URLs and this
// client exposes nothing beyond them.

export type Choice = "left" | "right";

export interface SessionInfo {
  session_id: string;
  trial_count: number;
}

export interface TrialInfo {
  trial: number;
  trial_count: number;
  left: string;
  right: string;
  answered: boolean;
}

export interface SubmitResult {
  accepted: boolean;
  next: number | null;
}

export interface TrialOutcome {
  trial: number;
  choice: Choice;
  correct: boolean;
}

export interface SessionReport {
  session_id: string;
  trial_count: number;
  answered: number;
  correct: number;
  accuracy: number;
  trials: TrialOutcome[];
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ status: number; json(): Promise<unknown> }>;

async function parseError(status: number, resp: { json(): Promise<unknown> }) {
  let message = `HTTP ${status}`;
  try {
    const body = (await resp.json()) as { error?: string };
    if (body && typeof body.error === "string") message = body.error;
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiError(status, message);
}

export class StudyClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch as unknown as FetchLike,
  ) {}

  url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchFn(this.url(path), {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (resp.status >= 400) throw await parseError(resp.status, resp);
    return (await resp.json()) as T;
  }

  createSession(): Promise<SessionInfo> {
    return this.request<SessionInfo>("POST", "/session");
  }

  getTrial(sessionId: string, index: number): Promise<TrialInfo> {
    return this.request<TrialInfo>("GET", `/session/${sessionId}/trial/${index}`);
  }

  submitResponse(sessionId: string, index: number, choice: Choice): Promise<SubmitResult> {
    return this.request<SubmitResult>(
      "POST",
      `/session/${sessionId}/trial/${index}/response`,
      { choice },
    );
  }

  getReport(sessionId: string): Promise<SessionReport> {
    return this.request<SessionReport>("GET", `/session/${sessionId}/report`);
  }
}
