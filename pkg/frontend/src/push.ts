/**
 * Live updates over the gateway push socket.
 *
 * Browsers cannot set an Authorization header on a WebSocket handshake,
 * so the token rides the subprotocol list as ("bearer", <token>). Push is
 * an accelerator only: every screen also works by polling, so a missing
 * or failed socket degrades silently.
 */

export interface PushConnection {
  close(): void;
}

type WsCtor = new (url: string, protocols?: string | string[]) => WebSocket;

export function connectPush(
  baseUrl: string,
  token: string,
  onMessage: (doc: any) => void,
  wsCtor?: WsCtor | null,
): PushConnection | null {
  const ctor = wsCtor === undefined ? (globalThis as any).WebSocket : wsCtor;
  if (!ctor) return null;
  const url = baseUrl.replace(/^http/, "ws") + "/push";
  let sock: WebSocket;
  try {
    sock = new ctor(url, ["bearer", token]);
  } catch {
    return null;
  }
  sock.onmessage = (event: MessageEvent) => {
    try {
      onMessage(JSON.parse(String(event.data)));
    } catch {
      // non-JSON frames carry nothing the client acts on
    }
  };
  return {
    close() {
      try {
        sock.close();
      } catch {
        // already gone
      }
    },
  };
}
