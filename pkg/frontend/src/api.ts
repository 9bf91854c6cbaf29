// Typed client for the session-service JSON API. Field names mirror the
// wire format exactly; nothing is computed client-side.

export type SessionCreated = {
  session_id: string;
  n_max: number;
};

export type NextQuestion = {
  question_id: string;
  step: number;
  n_max: number;
  display?: string;
};

export type AnswerResult = {
  theta_hat: number;
  step: number;
  finished: boolean;
  estimate_kind: string;
};

export type AdministeredItem = {
  question_id: string;
  correct: number;
};

export type SessionState = {
  session_id: string;
  status: "active" | "finished";
  policy: string;
  n_max: number;
  step: number;
  remaining: number;
  administered: AdministeredItem[];
  trajectory: number[];
  estimate_kind: string;
  pending_question_id: string | null;
};

export type Health = {
  status: string;
  model: string;
  sessions: number;
};

/** Error codes the service documents, plus "unreachable" for network failures. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit
) => Promise<Response>;

export class SessionApi {
  private readonly base: string;

  constructor(
    baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init)
  ) {
    this.base = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchImpl(this.base + path, init);
    } catch (err) {
      throw new ApiError(0, "unreachable", String(err));
    }
    let body: unknown = null;
    try {
      body = await res.json();
    } catch {
      // non-JSON body; fall through to the status check
    }
    if (!res.ok) {
      const doc = body as { code?: string; message?: string } | null;
      throw new ApiError(
        res.status,
        doc?.code ?? `http-${res.status}`,
        doc?.message ?? res.statusText
      );
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  createSession(policy?: string): Promise<SessionCreated> {
    return this.post<SessionCreated>("/sessions", policy ? { policy } : {});
  }

  nextQuestion(sessionId: string): Promise<NextQuestion> {
    return this.request<NextQuestion>(
      `/sessions/${encodeURIComponent(sessionId)}/next`
    );
  }

  submitAnswer(
    sessionId: string,
    questionId: string,
    correct: 0 | 1
  ): Promise<AnswerResult> {
    return this.post<AnswerResult>(
      `/sessions/${encodeURIComponent(sessionId)}/answer`,
      { question_id: questionId, correct }
    );
  }

  getState(sessionId: string): Promise<SessionState> {
    return this.request<SessionState>(
      `/sessions/${encodeURIComponent(sessionId)}`
    );
  }

  health(): Promise<Health> {
    return this.request<Health>("/healthz");
  }
}
