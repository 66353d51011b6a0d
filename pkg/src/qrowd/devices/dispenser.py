"""Coin dispenser wire protocol: line-delimited JSON over TCP.

One command per connection: the platform sends
``{"cmd": "dispense", "nonce": ..., "coins": n}``, the device answers
``{"ack": nonce}`` immediately and, once the coins have physically
dropped, ``{"done": nonce}`` or ``{"err": nonce, "reason": ...}``.
The device executes each nonce at most once; replays are acknowledged
and confirmed without dispensing again.

The stub server here stands in for the real machine in tests and local
runs: it honors the protocol, counts dispenses per nonce, and can be told
to fail or stall to exercise the failure paths.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
import time

from ..errors import QrowdError


class DeviceUnreachable(QrowdError):
    def __init__(self, message: str = "coin dispenser not reachable"):
        super().__init__("DeviceUnreachable", message)


def _send_line(sock: socket.socket, doc: dict) -> None:
    sock.sendall(json.dumps(doc, separators=(",", ":")).encode("utf-8") + b"\n")


def _read_line(reader) -> dict | None:
    line = reader.readline()
    if not line:
        return None
    return json.loads(line)


class StubDispenser:
    """Protocol-faithful stand-in for the coin machine.

    behavior: "ok" dispenses normally, "err" reports a hardware error after
    ack, "stall" acks but never completes (client-side timeout), with an
    optional done_delay_s before the final line.
    """

    def __init__(self, behavior: str = "ok", done_delay_s: float = 0.0):
        self.behavior = behavior
        self.done_delay_s = done_delay_s
        self.dispense_counts: dict[str, int] = {}
        self.coins_dispensed = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                request = _read_line(self.rfile)
                if not request or request.get("cmd") != "dispense":
                    return
                nonce = request.get("nonce")
                coins = request.get("coins")
                if not isinstance(nonce, str) or not isinstance(coins, int) or coins < 1:
                    _send_line(self.request, {"err": nonce, "reason": "bad-command"})
                    return
                _send_line(self.request, {"ack": nonce})
                if stub.done_delay_s:
                    time.sleep(stub.done_delay_s)
                if stub.behavior == "stall":
                    return
                if stub.behavior == "err":
                    _send_line(self.request, {"err": nonce, "reason": "hopper-jam"})
                    return
                with stub._lock:
                    # at-most-once per nonce: replays confirm without dispensing
                    first = nonce not in stub.dispense_counts
                    stub.dispense_counts[nonce] = stub.dispense_counts.get(nonce, 0) + 1
                    if first:
                        stub.coins_dispensed += coins
                _send_line(self.request, {"done": nonce})

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server(("127.0.0.1", 0), Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def dispensed(self, nonce: str) -> int:
        with self._lock:
            return self.dispense_counts.get(nonce, 0)

    def start(self) -> "StubDispenser":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class DispenserClient:
    """Client side of the protocol.

    ``dispense`` connects, sends the command, and blocks only until the ack;
    the done/err line is awaited on a background thread which reports the
    outcome ("done", "err", or "timeout") through the callback. Command
    initiation is serialized so the device sees one command at a time.
    """

    def __init__(self, host: str, port: int, ack_timeout_s: float = 2.0, done_timeout_s: float = 10.0):
        self.host = host
        self.port = port
        self.ack_timeout_s = ack_timeout_s
        self.done_timeout_s = done_timeout_s
        self._send_lock = threading.Lock()

    def dispense(self, nonce: str, coins: int, on_outcome) -> None:
        """Raises DeviceUnreachable if the device cannot be reached or does
        not ack; afterwards on_outcome(outcome, reason) is called exactly once."""
        with self._send_lock:
            try:
                sock = socket.create_connection((self.host, self.port), timeout=self.ack_timeout_s)
            except OSError as exc:
                raise DeviceUnreachable(f"connect failed: {exc}") from None
            try:
                sock.settimeout(self.ack_timeout_s)
                _send_line(sock, {"cmd": "dispense", "nonce": nonce, "coins": coins})
                reader = sock.makefile("rb")
                ack = _read_line(reader)
            except OSError as exc:
                sock.close()
                raise DeviceUnreachable(f"no ack: {exc}") from None
            if not ack or ack.get("ack") != nonce:
                sock.close()
                raise DeviceUnreachable("device did not acknowledge the command")

        def wait_done():
            try:
                sock.settimeout(self.done_timeout_s)
                final = _read_line(reader)
            except OSError:
                final = None
            finally:
                sock.close()
            if final is None:
                on_outcome("timeout", "no completion within timeout")
            elif final.get("done") == nonce:
                on_outcome("done", None)
            elif final.get("err") == nonce:
                on_outcome("err", final.get("reason", "device error"))
            else:
                on_outcome("err", "unexpected device reply")

        threading.Thread(target=wait_done, name=f"dispense-{nonce[:8]}", daemon=True).start()
