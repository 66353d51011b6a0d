/**
 * In-memory stand-in for the gateway, just deep enough to drive the app
 * through its screens in unit tests. Semantics mirror the real service:
 * responded tasks disappear from the list, a submit opens a pending
 * questionnaire, the questionnaire submit awards the task's reward, and a
 * redemption advances from dispensing on the first poll.
 */

import { EsmItem, Redemption, TaskCard } from "../src/api.js";

export const CARD_COUNT: TaskCard = {
  taskId: "t-count",
  title: "Count the swans",
  description: "How many swans are on the pond right now?",
  difficulty: "easy",
  responseType: "numeric",
  rewardAmount: 10,
  postedAt: 1755000000000,
  choices: null,
};

export const CARD_PICK: TaskCard = {
  taskId: "t-pick",
  title: "Pick the busiest entrance",
  description: "Which entrance has the most foot traffic?",
  difficulty: "medium",
  responseType: "singleChoice",
  rewardAmount: 5,
  postedAt: 1755100000000,
  choices: ["north", "south", "west"],
};

export const MARKER_ID = "m1";

interface LoggedRequest {
  method: string;
  path: string;
  body: any;
  auth: string | null;
}

export class FakeGateway {
  requests: LoggedRequest[] = [];
  events: any[] = [];
  responses: any[] = [];
  esmAnswers: any[] = [];
  feedbacks: any[] = [];

  tasks: TaskCard[] = [CARD_COUNT, CARD_PICK];
  esmItems: EsmItem[] = [
    { itemId: "mood", prompt: "How do you feel?", scale: "likert5" },
    { itemId: "note", prompt: "Anything to add?", scale: "freeText" },
  ];
  pendingEsm = new Set<string>();
  balance = 0;
  redemptions = new Map<string, Redemption & { outcomeApplied?: boolean }>();
  dispenseOutcome: "dispensed" | "refunded" = "dispensed";

  offline = false;
  authBroken = false;
  private counter = 0;

  fetch = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    if (this.offline) throw new TypeError("fetch failed");
    const url = new URL(String(input), "http://fake");
    const method = (init?.method ?? "GET").toUpperCase();
    const headers = new Headers(init?.headers);
    const auth = headers.get("Authorization");
    const body = init?.body ? JSON.parse(String(init.body)) : {};
    this.requests.push({ method, path: url.pathname + url.search, body, auth });
    try {
      return this.route(method, url, body, auth);
    } catch (err) {
      if (err instanceof FakeError) {
        return reply(err.status, { code: err.code, message: err.message });
      }
      throw err;
    }
  };

  private route(method: string, url: URL, body: any, auth: string | null): Response {
    const path = url.pathname;
    if (method === "POST" && path === "/auth/register") {
      return reply(200, { userId: `u-${body.email}` });
    }
    if (method === "POST" && path === "/auth/login") {
      return reply(200, {
        token: `tok-${body.email}`,
        userId: `u-${body.email}`,
        role: "participant",
        expiresAt: Date.now() + 3_600_000,
      });
    }

    if (this.authBroken) throw new FakeError("TokenInvalid", "token rejected", 401);
    if (!auth || !auth.startsWith("Bearer tok-")) {
      throw new FakeError("TokenMissing", "Authorization required", 401);
    }

    if (method === "GET" && path === "/tasks") {
      if (url.searchParams.get("marker") !== MARKER_ID) {
        throw new FakeError("UnknownMarker", "no such marker", 404);
      }
      return reply(200, { tasks: this.tasks, sessionId: url.searchParams.get("session") });
    }
    if (method === "POST" && path === "/events") {
      this.events.push({ ...body });
      return reply(200, { accepted: true });
    }
    const taskEvent = path.match(/^\/tasks\/([^/]+)\/events$/);
    if (method === "POST" && taskEvent) {
      this.events.push({ taskId: taskEvent[1], ...body });
      return reply(200, { accepted: true });
    }
    const taskResponse = path.match(/^\/tasks\/([^/]+)\/response$/);
    if (method === "POST" && taskResponse) {
      const taskId = taskResponse[1];
      this.responses.push({ taskId, ...body });
      this.tasks = this.tasks.filter((t) => t.taskId !== taskId);
      this.pendingEsm.add(taskId);
      return reply(200, {
        accepted: true,
        pendingEsm: true,
        responseId: this.nextId("r"),
        congruence: { result: "congruent", distanceM: 3.2 },
      });
    }
    const esmPath = path.match(/^\/esm\/([^/]+)$/);
    if (method === "GET" && esmPath && esmPath[1] !== "pending") {
      if (!this.pendingEsm.has(esmPath[1])) {
        throw new FakeError("NoPendingEsm", "nothing pending", 409);
      }
      return reply(200, { taskId: esmPath[1], instrumentId: "i1", items: this.esmItems });
    }
    if (method === "POST" && esmPath) {
      const taskId = esmPath[1];
      if (!this.pendingEsm.has(taskId)) {
        throw new FakeError("NoPendingEsm", "nothing pending", 409);
      }
      this.pendingEsm.delete(taskId);
      this.esmAnswers.push({ taskId, answers: body.answers });
      const card = [CARD_COUNT, CARD_PICK].find((c) => c.taskId === taskId);
      this.balance += card ? card.rewardAmount : 0;
      return reply(200, { accepted: true, responseId: this.nextId("e") });
    }
    if (method === "GET" && path === "/credits") {
      return reply(200, { userId: "u", balance: this.balance });
    }
    if (method === "POST" && path === "/credits/redeem") {
      const credits = body.credits;
      if (credits < 5) throw new FakeError("BelowMinimum", "minimum is 5 credits", 409);
      if (credits > this.balance) {
        throw new FakeError("InsufficientCredits", `balance ${this.balance} < ${credits}`, 409);
      }
      this.balance -= credits;
      const doc: Redemption = {
        redemptionId: this.nextId("red"),
        userId: "u",
        credits,
        coins: Math.floor(credits / 5),
        state: "dispensing",
        at: Date.now(),
      };
      this.redemptions.set(doc.redemptionId, doc);
      return reply(200, doc);
    }
    const redemptionPath = path.match(/^\/credits\/redemptions\/([^/]+)$/);
    if (method === "GET" && redemptionPath) {
      const doc = this.redemptions.get(redemptionPath[1]);
      if (!doc) throw new FakeError("UnknownRedemption", "no such redemption", 404);
      if (doc.state === "dispensing" && !doc.outcomeApplied) {
        doc.outcomeApplied = true;
        doc.state = this.dispenseOutcome;
        if (doc.state === "refunded") this.balance += doc.credits;
      }
      return reply(200, doc);
    }
    if (method === "POST" && path === "/feedback") {
      this.feedbacks.push({ ...body });
      return reply(200, { feedbackId: this.nextId("f") });
    }
    throw new FakeError("NotFound", `no route for ${method} ${path}`, 404);
  }

  private nextId(prefix: string): string {
    this.counter += 1;
    return `${prefix}${this.counter}`;
  }
}

class FakeError extends Error {
  constructor(
    readonly code: string,
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

function reply(status: number, doc: unknown): Response {
  return new Response(JSON.stringify(doc), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

/** Polls until the condition holds; fails the test on timeout. */
export async function until(cond: () => boolean, timeoutMs = 3000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (cond()) return;
    await new Promise((resolve) => setTimeout(resolve, 5));
  }
  throw new Error("condition not met in time");
}
