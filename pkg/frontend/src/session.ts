/**
 * Client session handling: the signed-in identity lives in app storage
 * (never in URLs), and every app start mints a fresh sessionId that is
 * attached to all emitted interaction events.
 */

export interface ClientSession {
  token: string;
  userId: string;
  role: string;
  email: string;
}

const SESSION_KEY = "qrowd.session";

export function mintSessionId(): string {
  const c = globalThis.crypto as Crypto | undefined;
  if (c && "randomUUID" in c) return c.randomUUID();
  return `s-${Date.now().toString(36)}-${Math.random().toString(36).slice(2, 10)}`;
}

export function loadSession(storage: Storage): ClientSession | null {
  const raw = storage.getItem(SESSION_KEY);
  if (!raw) return null;
  try {
    const doc = JSON.parse(raw);
    if (typeof doc.token === "string" && typeof doc.userId === "string") {
      return doc as ClientSession;
    }
  } catch {
    // fall through: a corrupt entry reads as signed out
  }
  storage.removeItem(SESSION_KEY);
  return null;
}

export function saveSession(storage: Storage, session: ClientSession): void {
  storage.setItem(SESSION_KEY, JSON.stringify(session));
}

export function clearSession(storage: Storage): void {
  storage.removeItem(SESSION_KEY);
}

/** Extracts the marker id from a QR deep link query string, if present. */
export function parseMarker(search: string): string | null {
  const params = new URLSearchParams(search.startsWith("?") ? search.slice(1) : search);
  const marker = params.get("marker");
  return marker && marker.trim() ? marker.trim() : null;
}
