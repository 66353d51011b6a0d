import { beforeEach, describe, expect, it } from "vitest";

import { ApiError } from "../src/api.js";
import { EventOutbox } from "../src/outbox.js";
import { until } from "./fakes.js";

interface Sent {
  path: string;
  body: Record<string, unknown>;
}

function makePost(state: { down: boolean; sent: Sent[] }) {
  return async (path: string, body: Record<string, unknown>) => {
    if (state.down) throw new ApiError("NetworkError", "offline", 0, true);
    if (body.reject) throw new ApiError("ValidationFailed", "bad event", 400);
    state.sent.push({ path, body });
  };
}

beforeEach(() => {
  window.localStorage.clear();
});

describe("EventOutbox", () => {
  it("posts directly while online", async () => {
    const state = { down: false, sent: [] as Sent[] };
    const outbox = new EventOutbox(makePost(state), window.localStorage);
    await outbox.emit("/events", { kind: "scan", n: 1 });
    expect(state.sent).toHaveLength(1);
    expect(outbox.size).toBe(0);
  });

  it("queues while offline and flushes in order", async () => {
    const state = { down: true, sent: [] as Sent[] };
    const outbox = new EventOutbox(makePost(state), window.localStorage);
    await outbox.emit("/events", { n: 1 });
    await outbox.emit("/events", { n: 2 });
    expect(outbox.size).toBe(2);
    expect(state.sent).toHaveLength(0);

    state.down = false;
    await outbox.emit("/events", { n: 3 });
    expect(outbox.size).toBe(0);
    expect(state.sent.map((s) => s.body.n)).toEqual([1, 2, 3]);
  });

  it("drops the oldest events beyond the bound", async () => {
    const state = { down: true, sent: [] as Sent[] };
    const outbox = new EventOutbox(makePost(state), window.localStorage, 200);
    for (let n = 0; n < 250; n++) {
      await outbox.emit("/events", { n });
    }
    expect(outbox.size).toBe(200);
    state.down = false;
    await outbox.flush();
    expect(state.sent[0].body.n).toBe(50);
    expect(state.sent[state.sent.length - 1].body.n).toBe(249);
  });

  it("drops events the server rejects instead of retrying them", async () => {
    const state = { down: false, sent: [] as Sent[] };
    const outbox = new EventOutbox(makePost(state), window.localStorage);
    await outbox.emit("/events", { reject: true });
    expect(outbox.size).toBe(0);
    expect(state.sent).toHaveLength(0);
    // a rejected event queued behind a backlog is skipped, not stuck
    state.down = true;
    await outbox.emit("/events", { n: 1 });
    state.down = false;
    await outbox.emit("/events", { reject: true });
    await outbox.emit("/events", { n: 2 });
    expect(state.sent.map((s) => s.body.n)).toEqual([1, 2]);
  });

  it("survives a restart through storage", async () => {
    const state = { down: true, sent: [] as Sent[] };
    const first = new EventOutbox(makePost(state), window.localStorage);
    await first.emit("/events", { n: 7 });
    expect(first.size).toBe(1);

    state.down = false;
    const second = new EventOutbox(makePost(state), window.localStorage);
    expect(second.size).toBe(1);
    await second.flush();
    expect(state.sent.map((s) => s.body.n)).toEqual([7]);
  });

  it("flushes when connectivity comes back", async () => {
    const state = { down: true, sent: [] as Sent[] };
    const outbox = new EventOutbox(makePost(state), window.localStorage);
    outbox.attach(window);
    await outbox.emit("/events", { n: 1 });
    state.down = false;
    window.dispatchEvent(new Event("online"));
    await until(() => state.sent.length === 1);
    expect(outbox.size).toBe(0);
  });
});
