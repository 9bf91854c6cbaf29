// DOM wiring: renders the whole app from a UiSessionView snapshot on
// every controller change. No optimistic UI; buttons just call the
// controller and the next render comes from the server round-trip.

import { SessionApi } from "./api.js";
import { renderTrajectorySvg } from "./chart.js";
import type { UiSessionView } from "./session.js";
import { SessionController } from "./session.js";

const REPLAY_POLL_MS = 2000;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class App {
  private api: SessionApi;
  private controller: SessionController;
  private view: UiSessionView;
  private pollTimer: number | null = null;

  constructor(
    private readonly root: HTMLElement,
    private baseUrl: string,
    private readonly onBaseUrlChange: (url: string) => void = () => {}
  ) {
    this.api = new SessionApi(baseUrl);
    this.controller = new SessionController(this.api, (v) => {
      this.view = v;
      this.render();
    });
    this.view = this.controller.view();
  }

  mount(): void {
    this.render();
  }

  private setBaseUrl(url: string): void {
    this.baseUrl = url;
    this.onBaseUrlChange(url);
    this.api = new SessionApi(url);
    this.controller = new SessionController(this.api, (v) => {
      this.view = v;
      this.render();
    });
    this.view = this.controller.view();
  }

  private stopPolling(): void {
    if (this.pollTimer !== null) {
      clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }

  private render(): void {
    const v = this.view;
    this.root.innerHTML = "";
    const shell = el("div", "shell");
    shell.appendChild(this.header());

    if (v.error && v.errorCode === "not-found") {
      shell.appendChild(this.notFound());
    } else {
      if (v.error) shell.appendChild(this.errorBanner(v));
      if (!v.sessionId) {
        shell.appendChild(this.startPanel());
      } else if (v.readOnly) {
        shell.appendChild(this.replayPanel(v));
      } else if (v.finished) {
        this.stopPolling();
        shell.appendChild(this.summaryPanel(v, "Test complete"));
      } else {
        shell.appendChild(this.questionPanel(v));
      }
    }
    this.root.appendChild(shell);
  }

  private header(): HTMLElement {
    const head = el("header");
    head.appendChild(el("h1", undefined, "Adaptive test"));
    const sub = el(
      "p",
      "tagline",
      "Each question is picked by a learned selection policy from your answers so far."
    );
    head.appendChild(sub);
    return head;
  }

  private errorBanner(v: UiSessionView): HTMLElement {
    const banner = el("div", "banner error");
    banner.appendChild(el("span", undefined, v.error ?? "error"));
    const retry = el("button", "retry", "Retry");
    retry.addEventListener("click", () => {
      if (!v.sessionId) {
        void this.controller.start();
      } else if (v.readOnly) {
        void this.controller.load(v.sessionId);
      } else {
        void this.controller.resync();
      }
    });
    banner.appendChild(retry);
    return banner;
  }

  private notFound(): HTMLElement {
    const panel = el("section", "panel");
    panel.appendChild(el("h2", undefined, "Session not found"));
    panel.appendChild(
      el("p", undefined, "The session id is unknown or has expired.")
    );
    const back = el("button", "primary", "Back");
    back.addEventListener("click", () => {
      this.stopPolling();
      this.setBaseUrl(this.baseUrl);
      this.render();
    });
    panel.appendChild(back);
    return panel;
  }

  private startPanel(): HTMLElement {
    const panel = el("section", "panel");

    const urlRow = el("div", "row");
    urlRow.appendChild(el("label", undefined, "Service URL"));
    const urlInput = el("input");
    urlInput.value = this.baseUrl;
    urlInput.addEventListener("change", () => {
      this.setBaseUrl(urlInput.value.trim());
    });
    urlRow.appendChild(urlInput);
    panel.appendChild(urlRow);

    const start = el("button", "primary", "Start test");
    start.disabled = this.view.busy;
    start.addEventListener("click", () => void this.controller.start());
    panel.appendChild(start);

    const replayRow = el("div", "row");
    replayRow.appendChild(el("label", undefined, "Replay session"));
    const idInput = el("input");
    idInput.placeholder = "session id";
    replayRow.appendChild(idInput);
    const viewBtn = el("button", undefined, "View");
    viewBtn.addEventListener("click", () => {
      const id = idInput.value.trim();
      if (id) void this.loadReplay(id);
    });
    replayRow.appendChild(viewBtn);
    panel.appendChild(replayRow);

    return panel;
  }

  private async loadReplay(id: string): Promise<void> {
    this.stopPolling();
    await this.controller.load(id);
    // live-refresh while the session is still active on the server
    if (!this.view.finished && !this.view.error) {
      this.pollTimer = setInterval(() => {
        if (this.view.finished || this.view.error) {
          this.stopPolling();
        } else {
          void this.controller.load(id);
        }
      }, REPLAY_POLL_MS) as unknown as number;
    }
  }

  private questionPanel(v: UiSessionView): HTMLElement {
    const panel = el("section", "panel");
    const q = v.question;
    panel.appendChild(
      el("div", "stepline", q ? `Question ${q.step} of ${v.nMax}` : "…")
    );
    const card = el("div", "card");
    if (q) {
      const bare = q.text === q.id;
      card.appendChild(
        el("p", bare ? "qid" : "qtext", bare ? `Question ${q.id}` : q.text)
      );
      const controls = el("div", "controls");
      const right = el("button", "primary", "I got it right");
      const wrong = el("button", undefined, "I got it wrong");
      right.disabled = wrong.disabled = v.busy;
      right.addEventListener("click", () => void this.controller.answer(1));
      wrong.addEventListener("click", () => void this.controller.answer(0));
      controls.appendChild(right);
      controls.appendChild(wrong);
      card.appendChild(controls);
    } else {
      card.appendChild(el("p", "qid", v.busy ? "Loading…" : ""));
    }
    panel.appendChild(card);
    panel.appendChild(this.chart(v));
    return panel;
  }

  private summaryPanel(v: UiSessionView, title: string): HTMLElement {
    const panel = el("section", "panel");
    panel.appendChild(el("h2", undefined, title));
    const last = v.trajectory[v.trajectory.length - 1];
    if (last) {
      panel.appendChild(
        el(
          "p",
          "estimate",
          `Final ${v.estimateKind ?? "estimate"}: ${last.theta.toFixed(4)}`
        )
      );
    }
    panel.appendChild(this.chart(v));
    const list = el("ol", "administered");
    for (const item of v.administered) {
      list.appendChild(
        el(
          "li",
          item.correct ? "good" : "bad",
          `${item.question_id}: ${item.correct ? "correct" : "incorrect"}`
        )
      );
    }
    panel.appendChild(list);
    const again = el("button", "primary", "Take another test");
    again.addEventListener("click", () => {
      this.stopPolling();
      void this.controller.start();
    });
    panel.appendChild(again);
    return panel;
  }

  private replayPanel(v: UiSessionView): HTMLElement {
    const title = v.finished
      ? `Session ${v.sessionId} (finished)`
      : `Session ${v.sessionId} (live)`;
    const panel = this.summaryPanel(v, title);
    return panel;
  }

  private chart(v: UiSessionView): HTMLElement {
    const wrap = el("div", "chartwrap");
    wrap.innerHTML = renderTrajectorySvg(
      v.trajectory.map((p) => p.theta),
      { nMax: v.nMax }
    );
    return wrap;
  }
}
