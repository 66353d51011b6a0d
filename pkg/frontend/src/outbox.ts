/**
 * Store-and-forward queue for interaction events.
 *
 * Events are telemetry: the UI never blocks on them. When the gateway is
 * unreachable the event is queued (bounded, oldest dropped first) and the
 * backlog is flushed in arrival order once the network returns. An event
 * the server rejects outright is dropped; replaying it cannot succeed.
 */

import { ApiError } from "./api.js";

export interface QueuedEvent {
  path: string;
  body: Record<string, unknown>;
}

type PostFn = (path: string, body: Record<string, unknown>) => Promise<unknown>;

const QUEUE_KEY = "qrowd.outbox";

export class EventOutbox {
  private queue: QueuedEvent[];
  private flushing = false;

  constructor(
    private readonly post: PostFn,
    private readonly storage: Storage,
    readonly limit = 200,
  ) {
    this.queue = this.loadQueue();
  }

  get size(): number {
    return this.queue.length;
  }

  /** Flush whenever connectivity comes back. */
  attach(target: Pick<Window, "addEventListener">): void {
    target.addEventListener("online", () => {
      void this.flush();
    });
  }

  async emit(path: string, body: Record<string, unknown>): Promise<void> {
    if (this.queue.length > 0) {
      // keep arrival order: new events go behind the backlog
      this.enqueue({ path, body });
      await this.flush();
      return;
    }
    try {
      await this.post(path, body);
    } catch (err) {
      if (err instanceof ApiError && err.network) {
        this.enqueue({ path, body });
      }
      // domain rejections are dropped: the event was malformed or stale
    }
  }

  async flush(): Promise<void> {
    if (this.flushing) return;
    this.flushing = true;
    try {
      while (this.queue.length > 0) {
        const next = this.queue[0];
        try {
          await this.post(next.path, next.body);
        } catch (err) {
          if (err instanceof ApiError && err.network) return;
          // rejected for cause: drop it and keep draining
        }
        this.queue.shift();
        this.persist();
      }
    } finally {
      this.flushing = false;
    }
  }

  private enqueue(event: QueuedEvent): void {
    this.queue.push(event);
    while (this.queue.length > this.limit) {
      // bounded storage: the newest context wins
      this.queue.shift();
    }
    this.persist();
  }

  private loadQueue(): QueuedEvent[] {
    try {
      const raw = this.storage.getItem(QUEUE_KEY);
      const parsed = raw ? JSON.parse(raw) : [];
      return Array.isArray(parsed) ? parsed : [];
    } catch {
      return [];
    }
  }

  private persist(): void {
    try {
      this.storage.setItem(QUEUE_KEY, JSON.stringify(this.queue));
    } catch {
      // storage full or unavailable: the in-memory queue still works
    }
  }
}
