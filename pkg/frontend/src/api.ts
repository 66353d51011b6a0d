/**
 * Typed client for the gateway HTTP surface.
 *
 * Every method resolves to the parsed JSON document the gateway returned.
 * Error responses become ApiError carrying the gateway's error code;
 * transport failures become ApiError with network=true so callers can
 * tell "the server said no" from "the server was unreachable".
 */

export type Difficulty = "easy" | "medium" | "hard";
export type ResponseType =
  | "text"
  | "singleChoice"
  | "multiChoice"
  | "numeric"
  | "photo"
  | "audio";

export interface TaskCard {
  taskId: string;
  title: string;
  description: string;
  difficulty: Difficulty;
  responseType: ResponseType;
  rewardAmount: number;
  postedAt: number;
  choices: string[] | null;
}

export interface Fix {
  position: { lat: number; lon: number };
  accuracyM: number;
  capturedAt: number;
}

export interface EsmItem {
  itemId: string;
  prompt: string;
  scale: "likert5" | "likert7" | "freeText";
}

export interface Redemption {
  redemptionId: string;
  userId: string;
  credits: number;
  coins: number;
  state: "dispensing" | "dispensed" | "failed" | "refunded";
  at: number;
}

export interface LoginReply {
  token: string;
  expiresAt: number;
  userId: string;
  role: string;
}

export class ApiError extends Error {
  constructor(
    readonly code: string,
    message: string,
    readonly status: number,
    readonly network = false,
  ) {
    super(message);
  }
}

const AUTH_CODES = ["TokenMissing", "TokenInvalid", "TokenExpired"];

export function isAuthExpiry(err: unknown): boolean {
  return err instanceof ApiError && AUTH_CODES.includes(err.code);
}

type FetchLike = typeof fetch;

export class Api {
  token: string | null = null;

  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  async call(
    method: "GET" | "POST",
    path: string,
    body?: Record<string, unknown>,
  ): Promise<any> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    let res: Response;
    try {
      res = await this.fetchImpl(this.baseUrl + path, {
        method,
        headers,
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new ApiError("NetworkError", String(err), 0, true);
    }
    let doc: any = {};
    try {
      doc = await res.json();
    } catch {
      // non-JSON bodies only happen on transport-level failures
    }
    if (!res.ok) {
      throw new ApiError(
        doc.code ?? `Http${res.status}`,
        doc.message ?? `request failed with status ${res.status}`,
        res.status,
      );
    }
    return doc;
  }

  // auth ---------------------------------------------------------------
  register(email: string, password: string): Promise<{ userId: string }> {
    return this.call("POST", "/auth/register", { email, password });
  }

  login(email: string, password: string, sessionId: string): Promise<LoginReply> {
    return this.call("POST", "/auth/login", { email, password, sessionId });
  }

  // markers and tasks ----------------------------------------------------
  marker(markerId: string): Promise<any> {
    return this.call("GET", `/markers/${markerId}`);
  }

  tasksForMarker(
    markerId: string,
    sessionId: string,
  ): Promise<{ tasks: TaskCard[]; sessionId: string }> {
    const query = new URLSearchParams({ marker: markerId, session: sessionId });
    return this.call("GET", `/tasks?${query}`);
  }

  submitResponse(
    taskId: string,
    payload: { markerId: string; body: unknown; fix: Fix | null; sessionId: string },
  ): Promise<{ accepted: boolean; pendingEsm: boolean; responseId: string; congruence: any }> {
    return this.call("POST", `/tasks/${taskId}/response`, payload as any);
  }

  upload(mediaType: string, dataB64: string): Promise<{ link: string }> {
    return this.call("POST", "/uploads", { mediaType, data: dataB64 });
  }

  // questionnaires -------------------------------------------------------
  esmPending(): Promise<{ pending: { taskId: string; instrumentId: string | null }[] }> {
    return this.call("GET", "/esm/pending");
  }

  esmInstrument(
    taskId: string,
  ): Promise<{ taskId: string; instrumentId: string | null; items: EsmItem[] }> {
    return this.call("GET", `/esm/${taskId}`);
  }

  esmSubmit(taskId: string, answers: Record<string, unknown>): Promise<{ accepted: boolean }> {
    return this.call("POST", `/esm/${taskId}`, { answers });
  }

  // credits ----------------------------------------------------------------
  credits(): Promise<{ userId: string; balance: number }> {
    return this.call("GET", "/credits");
  }

  redeem(credits: number, sessionId: string): Promise<Redemption> {
    return this.call("POST", "/credits/redeem", { credits, sessionId });
  }

  redemption(redemptionId: string): Promise<Redemption> {
    return this.call("GET", `/credits/redemptions/${redemptionId}`);
  }

  // feedback -----------------------------------------------------------------
  feedback(text: string, sessionId: string): Promise<{ feedbackId: string }> {
    return this.call("POST", "/feedback", { text, sessionId });
  }
}
