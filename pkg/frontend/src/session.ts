// Client-side session state machine. The server is the single source of
// truth: every transition waits for its acknowledgment, the only
// answerable question is the server's pending one, and all displayed
// numbers are taken verbatim from API responses.

import type { AdministeredItem, SessionApi } from "./api.js";
import { ApiError } from "./api.js";
import type { TrajectoryPoint } from "./chart.js";
import { trajectoryPoints } from "./chart.js";

/** The API surface the controller needs (stubbable in tests). */
export type SessionApiLike = Pick<
  SessionApi,
  "createSession" | "nextQuestion" | "submitAnswer" | "getState"
>;

export type UiQuestion = {
  id: string;
  /** Display text when the server provides it, else the bare id. */
  text: string;
  step: number;
};

export type UiSessionView = {
  sessionId: string | null;
  question: UiQuestion | null;
  step: number;
  nMax: number;
  trajectory: TrajectoryPoint[];
  administered: AdministeredItem[];
  finished: boolean;
  /** True while a round-trip is in flight; answer clicks are no-ops. */
  busy: boolean;
  error: string | null;
  errorCode: string | null;
  estimateKind: string | null;
  readOnly: boolean;
  resyncCount: number;
};

function emptyView(): UiSessionView {
  return {
    sessionId: null,
    question: null,
    step: 0,
    nMax: 0,
    trajectory: [],
    administered: [],
    finished: false,
    busy: false,
    error: null,
    errorCode: null,
    estimateKind: null,
    readOnly: false,
    resyncCount: 0,
  };
}

export type ViewListener = (view: UiSessionView) => void;

export class SessionController {
  private state: UiSessionView = emptyView();

  constructor(
    private readonly api: SessionApiLike,
    private readonly onChange: ViewListener = () => {}
  ) {}

  view(): UiSessionView {
    return {
      ...this.state,
      trajectory: [...this.state.trajectory],
      administered: [...this.state.administered],
    };
  }

  private set(patch: Partial<UiSessionView>): void {
    this.state = { ...this.state, ...patch };
    this.onChange(this.view());
  }

  private fail(err: unknown): void {
    if (err instanceof ApiError) {
      this.set({ busy: false, error: err.message, errorCode: err.code });
    } else {
      this.set({ busy: false, error: String(err), errorCode: "internal" });
    }
  }

  /** Create a session and fetch its first question. */
  async start(policy?: string): Promise<void> {
    if (this.state.busy) return;
    this.state = emptyView();
    this.set({ busy: true });
    try {
      const created = await this.api.createSession(policy);
      this.set({
        sessionId: created.session_id,
        nMax: created.n_max,
      });
      await this.fetchNext();
      this.set({ busy: false });
    } catch (err) {
      this.fail(err);
    }
  }

  /**
   * Answer the pending question. No-op while a round-trip is in flight
   * (double-click protection) or when nothing is pending. A 409 from
   * the server means our picture is stale; resync instead of surfacing
   * the error.
   */
  async answer(correct: 0 | 1): Promise<void> {
    const { busy, question, sessionId, finished, readOnly } = this.state;
    if (busy || !question || !sessionId || finished || readOnly) return;
    this.set({ busy: true, error: null, errorCode: null });
    try {
      const result = await this.api.submitAnswer(
        sessionId,
        question.id,
        correct
      );
      // acknowledged: the old pending question must never linger
      this.set({
        question: null,
        trajectory: [
          ...this.state.trajectory,
          { step: result.step, theta: result.theta_hat },
        ],
        step: result.step,
        estimateKind: result.estimate_kind,
        finished: result.finished,
      });
      if (result.finished) {
        await this.refreshState();
      } else {
        await this.fetchNext();
      }
      this.set({ busy: false });
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        await this.resync();
        return;
      }
      this.fail(err);
    }
  }

  /** Rebuild the view from the server after a conflict or reconnect. */
  async resync(): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    this.set({ busy: true });
    try {
      await this.refreshState();
      if (!this.state.finished) {
        await this.fetchNext();
      }
      this.set({ busy: false, resyncCount: this.state.resyncCount + 1 });
    } catch (err) {
      this.fail(err);
    }
  }

  /** Read-only view of an existing session (replay page). */
  async load(sessionId: string): Promise<void> {
    this.state = emptyView();
    this.set({ busy: true, sessionId, readOnly: true });
    try {
      await this.refreshState();
      this.set({ busy: false });
    } catch (err) {
      this.fail(err);
    }
  }

  private async fetchNext(): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    const next = await this.api.nextQuestion(sessionId);
    this.set({
      question: {
        id: next.question_id,
        text: next.display ?? next.question_id,
        step: next.step,
      },
      nMax: next.n_max,
    });
  }

  private async refreshState(): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    const state = await this.api.getState(sessionId);
    this.set({
      question: null,
      step: state.step,
      nMax: state.n_max,
      trajectory: trajectoryPoints(state.trajectory),
      administered: state.administered,
      finished: state.status === "finished",
      estimateKind: state.estimate_kind,
    });
  }
}
