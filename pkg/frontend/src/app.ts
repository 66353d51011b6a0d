/**
 * Participant application: a small screen state machine rendered straight
 * into the DOM, no framework.
 *
 * Flow: QR deep link (?marker=) -> sign in -> task list for the marker ->
 * task detail with the matching input widget -> blocking questionnaire ->
 * credits and redemption -> feedback / sign out.
 *
 * Every transition emits its interaction event through the outbox; list
 * "seen" and submit "completed" events are derived server-side. Balances
 * always come from the gateway, the client never computes credits.
 */

import { Api, ApiError, EsmItem, Fix, Redemption, TaskCard, isAuthExpiry } from "./api.js";
import {
  ClientSession,
  clearSession,
  loadSession,
  mintSessionId,
  parseMarker,
  saveSession,
} from "./session.js";
import { EventOutbox } from "./outbox.js";
import { Widget, WidgetError, buildWidget } from "./widgets.js";
import { PushConnection, connectPush } from "./push.js";

export interface AppOptions {
  api: Api;
  root: HTMLElement;
  storage: Storage;
  getFix: () => Promise<Fix | null>;
  pollMs?: number;
  /** Pass null to disable the push socket (polling still covers everything). */
  wsCtor?: (new (url: string, protocols?: string | string[]) => WebSocket) | null;
}

type Screen = "auth" | "tasks" | "detail" | "credits" | "feedback";

const LIKERT_BOUNDS: Record<string, number> = { likert5: 5, likert7: 7 };

export class App {
  readonly sessionId = mintSessionId();
  readonly outbox: EventOutbox;

  markerId: string | null = null;
  session: ClientSession | null = null;
  screen: Screen = "auth";
  authMode: "login" | "register" = "login";
  tasks: TaskCard[] = [];
  current: TaskCard | null = null;
  currentSubmitted = false;
  esm: { taskId: string; items: EsmItem[] } | null = null;
  balance: number | null = null;
  redemption: Redemption | null = null;
  error: string | null = null;
  notice: string | null = null;
  busy = false;

  private readonly api: Api;
  private readonly root: HTMLElement;
  private readonly storage: Storage;
  private readonly getFix: () => Promise<Fix | null>;
  private readonly pollMs: number;
  private readonly wsCtor: AppOptions["wsCtor"];
  private widget: Widget | null = null;
  private push: PushConnection | null = null;
  private pollTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(options: AppOptions) {
    this.api = options.api;
    this.root = options.root;
    this.storage = options.storage;
    this.getFix = options.getFix;
    this.pollMs = options.pollMs ?? 1000;
    this.wsCtor = options.wsCtor;
    this.outbox = new EventOutbox(
      (path, body) => this.api.call("POST", path, body),
      this.storage,
    );
  }

  /** Boot from the page URL; `search` is window.location.search. */
  async start(search: string): Promise<void> {
    this.markerId = parseMarker(search);
    this.session = loadSession(this.storage);
    if (this.session) {
      this.api.token = this.session.token;
      this.openPush();
      await this.enterTasks();
    } else {
      this.screen = "auth";
    }
    this.render();
  }

  stop(): void {
    if (this.pollTimer) clearTimeout(this.pollTimer);
    this.push?.close();
  }

  // auth -------------------------------------------------------------------
  async doAuth(email: string, password: string): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.error = null;
    this.render();
    try {
      if (this.authMode === "register") {
        await this.api.register(email, password);
      }
      const reply = await this.api.login(email, password, this.sessionId);
      this.api.token = reply.token;
      this.session = { token: reply.token, userId: reply.userId, role: reply.role, email };
      saveSession(this.storage, this.session);
      this.openPush();
      await this.enterTasks();
    } catch (err) {
      this.fail(err);
    }
    this.busy = false;
    this.render();
  }

  logout(): void {
    this.leaveDetail();
    clearSession(this.storage);
    this.session = null;
    this.api.token = null;
    this.push?.close();
    this.push = null;
    this.balance = null;
    this.redemption = null;
    this.tasks = [];
    this.screen = "auth";
    this.notice = "signed out";
    this.render();
  }

  // task list and detail -----------------------------------------------------
  async enterTasks(): Promise<void> {
    this.leaveDetail();
    this.screen = "tasks";
    if (!this.markerId || !this.session) return;
    // entering through a marker link is the scan moment
    await this.outbox.emit("/events", {
      kind: "scan",
      markerId: this.markerId,
      sessionId: this.sessionId,
    });
    await this.loadTasks();
  }

  async loadTasks(): Promise<void> {
    if (!this.markerId) return;
    try {
      const reply = await this.api.tasksForMarker(this.markerId, this.sessionId);
      this.tasks = reply.tasks;
    } catch (err) {
      this.fail(err);
    }
  }

  openTask(card: TaskCard): void {
    if (this.esm) return;
    this.current = card;
    this.currentSubmitted = false;
    this.widget = buildWidget(card, this.root.ownerDocument, this.api);
    this.screen = "detail";
    this.error = null;
    void this.outbox.emit(`/tasks/${card.taskId}/events`, {
      kind: "selected",
      sessionId: this.sessionId,
      markerId: this.markerId ?? undefined,
    });
    this.render();
  }

  async backToTasks(): Promise<void> {
    this.leaveDetail();
    this.screen = "tasks";
    await this.loadTasks();
    this.render();
  }

  private leaveDetail(): void {
    if (this.screen === "detail" && this.current && !this.currentSubmitted) {
      // abandonment: navigating away from an opened, unsubmitted task
      void this.outbox.emit(`/tasks/${this.current.taskId}/events`, {
        kind: "dropped",
        sessionId: this.sessionId,
        markerId: this.markerId ?? undefined,
      });
    }
    this.current = null;
    this.widget = null;
    this.currentSubmitted = false;
  }

  async submitCurrent(): Promise<void> {
    if (!this.current || !this.session || this.busy) return;
    this.busy = true;
    this.error = null;
    this.render();
    try {
      const body = await this.widget!.read();
      const fix = await this.getFix();
      await this.api.submitResponse(this.current.taskId, {
        markerId: this.markerId!,
        body,
        fix,
        sessionId: this.sessionId,
      });
      this.currentSubmitted = true;
      // the questionnaire blocks the flow before any credits update shows
      const instrument = await this.fetchInstrument(this.current.taskId);
      if (instrument.items.length === 0) {
        await this.api.esmSubmit(this.current.taskId, {});
        await this.enterCredits();
      } else {
        this.esm = { taskId: this.current.taskId, items: instrument.items };
      }
    } catch (err) {
      this.fail(err);
    }
    this.busy = false;
    this.render();
  }

  /** The pending record lands via an async server event; retry briefly. */
  private async fetchInstrument(taskId: string) {
    for (let attempt = 0; ; attempt++) {
      try {
        return await this.api.esmInstrument(taskId);
      } catch (err) {
        if (err instanceof ApiError && err.code === "NoPendingEsm" && attempt < 40) {
          await sleep(this.pollMs);
          continue;
        }
        throw err;
      }
    }
  }

  // questionnaire ------------------------------------------------------------
  async submitEsm(answers: Record<string, unknown>): Promise<void> {
    if (!this.esm || this.busy) return;
    this.busy = true;
    this.render();
    try {
      await this.api.esmSubmit(this.esm.taskId, answers);
      this.esm = null;
      this.current = null;
      this.widget = null;
      await this.enterCredits();
    } catch (err) {
      this.fail(err);
    }
    this.busy = false;
    this.render();
  }

  // credits -------------------------------------------------------------------
  async enterCredits(): Promise<void> {
    if (this.esm) return;
    this.leaveDetail();
    this.screen = "credits";
    await this.refreshCredits();
  }

  async refreshCredits(): Promise<void> {
    try {
      this.balance = (await this.api.credits()).balance;
    } catch (err) {
      this.fail(err);
    }
  }

  async redeem(credits: number): Promise<void> {
    if (this.busy) return;
    if (!Number.isInteger(credits) || credits <= 0) {
      this.error = "enter how many credits to redeem";
      this.render();
      return;
    }
    this.busy = true;
    this.error = null;
    this.render();
    try {
      this.redemption = await this.api.redeem(credits, this.sessionId);
      await this.refreshCredits();
      if (this.redemption.state === "dispensing") {
        this.schedulePoll(this.redemption.redemptionId);
      }
    } catch (err) {
      this.fail(err);
    }
    this.busy = false;
    this.render();
  }

  private schedulePoll(redemptionId: string): void {
    if (this.pollTimer) clearTimeout(this.pollTimer);
    this.pollTimer = setTimeout(async () => {
      this.pollTimer = null;
      if (this.redemption?.redemptionId !== redemptionId) return;
      try {
        const doc = await this.api.redemption(redemptionId);
        this.redemption = doc;
        if (doc.state === "dispensing") {
          this.schedulePoll(redemptionId);
        } else {
          await this.refreshCredits();
        }
      } catch (err) {
        this.fail(err);
      }
      this.render();
    }, this.pollMs);
  }

  private openPush(): void {
    if (!this.session) return;
    this.push?.close();
    this.push = connectPush(
      this.api.baseUrl,
      this.session.token,
      (doc) => this.onPush(doc),
      this.wsCtor,
    );
  }

  private onPush(doc: any): void {
    if (doc?.type !== "redemption.updated") return;
    if (doc.redemptionId !== this.redemption?.redemptionId) return;
    this.redemption = doc;
    if (doc.state !== "dispensing") {
      void this.refreshCredits().then(() => this.render());
    }
    this.render();
  }

  // feedback --------------------------------------------------------------------
  async sendFeedback(text: string): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.error = null;
    this.render();
    try {
      await this.api.feedback(text, this.sessionId);
      this.notice = "thanks, your feedback was recorded";
    } catch (err) {
      this.fail(err);
    }
    this.busy = false;
    this.render();
  }

  // error handling -----------------------------------------------------------
  private fail(err: unknown): void {
    if (isAuthExpiry(err)) {
      // marker context survives so sign-in drops the user back where they were
      clearSession(this.storage);
      this.session = null;
      this.api.token = null;
      this.push?.close();
      this.push = null;
      this.esm = null;
      this.screen = "auth";
      this.error = "session expired, sign in again";
    } else if (err instanceof WidgetError) {
      this.error = err.message;
    } else if (err instanceof ApiError) {
      this.error = `${err.code}: ${err.message}`;
    } else {
      this.error = String(err);
    }
  }

  // rendering ------------------------------------------------------------------
  render(): void {
    const doc = this.root.ownerDocument;
    const frame = el(doc, "div", { class: "app" });
    frame.appendChild(this.renderHeader(doc));
    if (this.error) frame.appendChild(el(doc, "p", { id: "error", class: "error" }, [this.error]));
    if (this.notice) frame.appendChild(el(doc, "p", { id: "notice" }, [this.notice]));
    const main = el(doc, "main");
    switch (this.screen) {
      case "auth":
        main.appendChild(this.renderAuth(doc));
        break;
      case "tasks":
        main.appendChild(this.renderTasks(doc));
        break;
      case "detail":
        main.appendChild(this.renderDetail(doc));
        break;
      case "credits":
        main.appendChild(this.renderCredits(doc));
        break;
      case "feedback":
        main.appendChild(this.renderFeedback(doc));
        break;
    }
    frame.appendChild(main);
    if (this.esm) frame.appendChild(this.renderEsmModal(doc));
    this.root.replaceChildren(frame);
  }

  private renderHeader(doc: Document): HTMLElement {
    const header = el(doc, "header");
    header.appendChild(el(doc, "h1", {}, ["qrowd"]));
    if (this.session) {
      const nav = el(doc, "nav");
      const mk = (id: string, label: string, action: () => void) => {
        const btn = el(doc, "button", { id, type: "button" }, [label]);
        btn.onclick = () => {
          if (this.esm) return;
          this.notice = null;
          action();
        };
        nav.appendChild(btn);
      };
      mk("nav-tasks", "Tasks", () => void this.backToTasks());
      mk("nav-credits", "Credits", () => void this.enterCredits().then(() => this.render()));
      mk("nav-feedback", "Feedback", () => {
        this.leaveDetail();
        this.screen = "feedback";
        this.render();
      });
      header.appendChild(nav);
      header.appendChild(el(doc, "span", { id: "whoami" }, [this.session.email]));
    }
    return header;
  }

  private renderAuth(doc: Document): HTMLElement {
    const box = el(doc, "section", { id: "screen-auth" });
    if (this.markerId) {
      box.appendChild(
        el(doc, "p", { id: "marker-banner" }, [
          `Marker ${this.markerId} scanned. Sign in to see its tasks.`,
        ]),
      );
    }
    const toggle = el(doc, "div");
    const loginBtn = el(doc, "button", { id: "mode-login", type: "button" }, ["Sign in"]);
    const registerBtn = el(doc, "button", { id: "mode-register", type: "button" }, [
      "Create account",
    ]);
    loginBtn.onclick = () => {
      this.authMode = "login";
      this.render();
    };
    registerBtn.onclick = () => {
      this.authMode = "register";
      this.render();
    };
    toggle.append(loginBtn, registerBtn);
    box.appendChild(toggle);

    const email = el(doc, "input", { id: "auth-email", type: "email", placeholder: "email" });
    const password = el(doc, "input", {
      id: "auth-password",
      type: "password",
      placeholder: "password",
    });
    const submit = el(doc, "button", { id: "auth-submit", type: "button" }, [
      this.authMode === "login" ? "Sign in" : "Create account",
    ]);
    submit.onclick = () => void this.doAuth(email.value.trim(), password.value);
    box.append(email, password, submit);
    return box;
  }

  private renderTasks(doc: Document): HTMLElement {
    const box = el(doc, "section", { id: "screen-tasks" });
    if (!this.markerId) {
      box.appendChild(
        el(doc, "p", { id: "no-marker" }, [
          "Scan a location poster to see the tasks available there.",
        ]),
      );
      return box;
    }
    box.appendChild(el(doc, "h2", {}, ["Tasks here"]));
    if (this.tasks.length === 0) {
      box.appendChild(el(doc, "p", { id: "no-tasks" }, ["Nothing open at this location."]));
      return box;
    }
    const list = el(doc, "ul", { id: "task-list" });
    for (const card of this.tasks) {
      const item = el(doc, "li", { "data-task": card.taskId });
      const open = el(doc, "button", { class: "task-open", type: "button" }, [card.title]);
      open.onclick = () => this.openTask(card);
      item.appendChild(open);
      item.appendChild(
        el(doc, "p", { class: "task-meta" }, [
          `${card.difficulty} · ${card.responseType} · ${card.rewardAmount} credits · posted ${new Date(card.postedAt).toLocaleDateString()}`,
        ]),
      );
      item.appendChild(el(doc, "p", { class: "task-desc" }, [card.description]));
      list.appendChild(item);
    }
    box.appendChild(list);
    return box;
  }

  private renderDetail(doc: Document): HTMLElement {
    const box = el(doc, "section", { id: "screen-detail" });
    if (!this.current) return box;
    box.appendChild(el(doc, "h2", {}, [this.current.title]));
    box.appendChild(el(doc, "p", {}, [this.current.description]));
    box.appendChild(
      el(doc, "p", { class: "task-meta" }, [
        `${this.current.difficulty} · ${this.current.rewardAmount} credits`,
      ]),
    );
    if (this.widget) box.appendChild(this.widget.root);
    const submit = el(doc, "button", { id: "submit-response", type: "button" }, [
      this.busy ? "Submitting…" : "Submit",
    ]);
    submit.onclick = () => void this.submitCurrent();
    const back = el(doc, "button", { id: "back-to-tasks", type: "button" }, ["Back"]);
    back.onclick = () => void this.backToTasks();
    box.append(submit, back);
    return box;
  }

  private renderEsmModal(doc: Document): HTMLElement {
    const overlay = el(doc, "div", { id: "esm-modal", class: "modal" });
    const box = el(doc, "section");
    box.appendChild(el(doc, "h2", {}, ["One quick questionnaire"]));
    const inputs = new Map<string, () => unknown | null>();
    for (const item of this.esm!.items) {
      const field = el(doc, "fieldset", { "data-item": item.itemId });
      field.appendChild(el(doc, "legend", {}, [item.prompt]));
      if (item.scale === "freeText") {
        const area = el(doc, "textarea", { "data-esm": item.itemId });
        field.appendChild(area);
        inputs.set(item.itemId, () => area.value);
      } else {
        const bound = LIKERT_BOUNDS[item.scale];
        const radios: HTMLInputElement[] = [];
        for (let value = 1; value <= bound; value++) {
          const label = el(doc, "label");
          const radio = el(doc, "input", {
            type: "radio",
            name: `esm-${item.itemId}`,
            value: String(value),
          });
          radios.push(radio);
          label.append(radio, doc.createTextNode(` ${value}`));
          field.appendChild(label);
        }
        inputs.set(item.itemId, () => {
          const picked = radios.find((r) => r.checked);
          return picked ? Number(picked.value) : null;
        });
      }
      box.appendChild(field);
    }
    const submit = el(doc, "button", { id: "esm-submit", type: "button" }, [
      this.busy ? "Sending…" : "Send answers",
    ]);
    submit.onclick = () => {
      const answers: Record<string, unknown> = {};
      for (const [itemId, read] of inputs) {
        const value = read();
        if (value === null) {
          this.error = "answer every question";
          this.render();
          return;
        }
        answers[itemId] = value;
      }
      this.error = null;
      void this.submitEsm(answers);
    };
    box.appendChild(submit);
    overlay.appendChild(box);
    return overlay;
  }

  private renderCredits(doc: Document): HTMLElement {
    const box = el(doc, "section", { id: "screen-credits" });
    box.appendChild(el(doc, "h2", {}, ["Credits"]));
    box.appendChild(
      el(doc, "p", { id: "balance" }, [
        this.balance === null ? "…" : `Balance: ${this.balance} credits`,
      ]),
    );
    const amount = el(doc, "input", { id: "redeem-amount", type: "number", min: "1" });
    const redeemBtn = el(doc, "button", { id: "redeem-btn", type: "button" }, [
      this.busy ? "Working…" : "Redeem for coins",
    ]);
    redeemBtn.onclick = () => void this.redeem(Number(amount.value));
    box.append(amount, redeemBtn);
    if (this.redemption) {
      const r = this.redemption;
      const text =
        r.state === "dispensing"
          ? "dispensing…"
          : r.state === "dispensed"
            ? `Dispensed ${r.coins} coins. Enjoy!`
            : r.state === "refunded"
              ? "The dispenser failed; your credits were refunded."
              : "Dispensing failed.";
      box.appendChild(el(doc, "p", { id: "redemption-state", "data-state": r.state }, [text]));
    }
    return box;
  }

  private renderFeedback(doc: Document): HTMLElement {
    const box = el(doc, "section", { id: "screen-feedback" });
    box.appendChild(el(doc, "h2", {}, ["Feedback"]));
    const area = el(doc, "textarea", { id: "feedback-text" });
    const send = el(doc, "button", { id: "feedback-send", type: "button" }, ["Send"]);
    send.onclick = () => void this.sendFeedback(area.value.trim());
    const logoutBtn = el(doc, "button", { id: "logout-btn", type: "button" }, ["Sign out"]);
    logoutBtn.onclick = () => this.logout();
    box.append(area, send, logoutBtn);
    return box;
  }
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  for (const [name, value] of Object.entries(attrs)) {
    node.setAttribute(name, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
