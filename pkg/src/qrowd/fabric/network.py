"""Networked transport: HTTP request hop, TCP event broker.

Wire format is byte-identical with the in-process fabric: the same
canonical envelope JSON travels as an HTTP POST body for requests and
inside length-prefixed frames on persistent TCP connections for events.
The broker daemon reuses the same at-least-once Broker core; its delivery
hook pushes an event frame to one attached subscriber connection and
waits for the matching ack, so a missing ack (crash, reject, timeout)
leads to redelivery exactly like a raising handler does in process.
"""

from __future__ import annotations

import http.client
import json
import socket
import struct
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse

from ..core import new_id
from ..errors import FabricTimeout, NoHealthyInstance, QrowdError
from .base import Fabric, ServiceInstance
from .broker import Broker
from .envelope import Envelope

FRAME_HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 32 * 1024 * 1024

# an instance host will not hold a request open longer than this
MAX_HOLD_MS = 60_000


def write_frame(sock: socket.socket, doc: dict) -> None:
    body = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    sock.sendall(FRAME_HEADER.pack(len(body)) + body)


def read_frame(reader) -> dict | None:
    header = reader.read(FRAME_HEADER.size)
    if len(header) < FRAME_HEADER.size:
        return None
    (length,) = FRAME_HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise QrowdError("FrameTooLarge", f"{length} byte frame exceeds the limit")
    body = reader.read(length)
    if len(body) < length:
        return None
    return json.loads(body)


class InstanceHost:
    """HTTP front for one ServiceInstance: POST /envelope in, envelope out.

    The server binds first so the endpoint is known before the instance is
    built; ``instance`` is assigned before the endpoint enters the routing
    table, so no request can observe it unset.
    """

    def __init__(self):
        self.instance: ServiceInstance | None = None
        host = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                if self.path == "/health":
                    body = json.dumps({"alive": host.instance.alive()}).encode()
                    self.send_response(200)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                else:
                    self.send_error(404)

            def do_POST(self):
                if self.path != "/envelope":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", "0"))
                body = self.rfile.read(length)
                timeout_ms = min(
                    int(self.headers.get("X-Timeout-Ms", "5000")), MAX_HOLD_MS
                )
                try:
                    env = Envelope.from_bytes(body)
                    pending = host.instance.deliver(env)
                except (QrowdError, ValueError, AttributeError):
                    self.send_response(503)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                try:
                    reply = pending.wait(timeout_ms / 1000.0)
                except TimeoutError:
                    self.send_response(504)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                out = reply.to_bytes()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)

        class Server(ThreadingHTTPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server(("127.0.0.1", 0), Handler)
        self.endpoint = f"http://127.0.0.1:{self._server.server_address[1]}"
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"host-{self.endpoint}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class _AttachedSubscriber:
    """One live delivery channel: writes are locked, acks resolved by id."""

    def __init__(self, sock: socket.socket, subscriber: str):
        self.sock = sock
        self.subscriber = subscriber
        self.write_lock = threading.Lock()
        self.pending: dict[str, dict] = {}
        self.pending_lock = threading.Lock()
        self.closed = False

    def resolve(self, delivery_id: str, ok: bool) -> None:
        with self.pending_lock:
            entry = self.pending.pop(delivery_id, None)
        if entry is not None:
            entry["ok"] = ok
            entry["done"].set()

    def close(self) -> None:
        self.closed = True
        with self.pending_lock:
            entries = list(self.pending.values())
            self.pending.clear()
        for entry in entries:
            entry["ok"] = False
            entry["done"].set()


class BrokerDaemon:
    """TCP face of the Broker: publish, subscribe, attach, ack frames."""

    def __init__(self, retention: int = 10_000, retry_backoff: float = 0.05,
                 ack_timeout_s: float = 10.0):
        self.broker = Broker(self._deliver, retention=retention, retry_backoff=retry_backoff)
        self.ack_timeout_s = ack_timeout_s
        self._attached: dict[str, list[_AttachedSubscriber]] = {}
        self._attached_lock = threading.Lock()
        self._rr: dict[str, int] = {}
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(("127.0.0.1", 0))
        self._server.listen(64)
        self._running = True
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="broker-accept", daemon=True
        )
        self._accept_thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()

    # server side -----------------------------------------------------------
    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_connection, args=(conn,),
                name="broker-conn", daemon=True,
            ).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        reader = conn.makefile("rb")
        attached: _AttachedSubscriber | None = None
        try:
            while self._running:
                try:
                    frame = read_frame(reader)
                except (QrowdError, ValueError):
                    break
                if frame is None:
                    break
                op = frame.get("op")
                if op == "publish":
                    try:
                        message_id = self.broker.publish(Envelope.from_doc(frame["env"]))
                        write_frame(conn, {"ok": True, "messageId": message_id})
                    except QrowdError as exc:
                        write_frame(conn, {"ok": False, "code": exc.code})
                elif op == "subscribe":
                    try:
                        self.broker.subscribe(frame["topic"], frame["subscriber"])
                        write_frame(conn, {"ok": True})
                    except QrowdError as exc:
                        write_frame(conn, {"ok": False, "code": exc.code})
                elif op == "attach":
                    attached = _AttachedSubscriber(conn, frame["subscriber"])
                    with self._attached_lock:
                        self._attached.setdefault(attached.subscriber, []).append(attached)
                    write_frame(conn, {"ok": True})
                elif op in ("ack", "reject") and attached is not None:
                    attached.resolve(frame.get("deliveryId", ""), op == "ack")
                else:
                    break
        finally:
            if attached is not None:
                with self._attached_lock:
                    links = self._attached.get(attached.subscriber, [])
                    if attached in links:
                        links.remove(attached)
                attached.close()
            reader.close()
            conn.close()

    def _deliver(self, subscriber: str, env: Envelope) -> None:
        with self._attached_lock:
            links = [l for l in self._attached.get(subscriber, []) if not l.closed]
            if not links:
                raise NoHealthyInstance(subscriber)
            self._rr[subscriber] = self._rr.get(subscriber, 0) + 1
            link = links[self._rr[subscriber] % len(links)]
        delivery_id = new_id()
        entry = {"done": threading.Event(), "ok": False}
        with link.pending_lock:
            link.pending[delivery_id] = entry
        try:
            with link.write_lock:
                write_frame(link.sock, {
                    "op": "event", "deliveryId": delivery_id, "env": env.to_doc(),
                })
        except OSError:
            link.resolve(delivery_id, False)
            raise NoHealthyInstance(subscriber) from None
        if not entry["done"].wait(self.ack_timeout_s) or not entry["ok"]:
            with link.pending_lock:
                link.pending.pop(delivery_id, None)
            raise QrowdError("DeliveryFailed", f"no ack from {subscriber}")

    def stop(self) -> None:
        self._running = False
        self.broker.stop()
        try:
            self._server.close()
        except OSError:
            pass
        with self._attached_lock:
            links = [l for ls in self._attached.values() for l in ls]
            self._attached.clear()
        for link in links:
            link.close()


class BrokerControlClient:
    """Lock-step publish/subscribe connection to the broker daemon."""

    def __init__(self, address: tuple[str, int]):
        self._address = address
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._reader = None

    def _ensure(self):
        if self._sock is None:
            self._sock = socket.create_connection(self._address, timeout=10.0)
            self._reader = self._sock.makefile("rb")
        return self._sock, self._reader

    def _call(self, frame: dict) -> dict:
        with self._lock:
            try:
                sock, reader = self._ensure()
                write_frame(sock, frame)
                reply = read_frame(reader)
            except OSError:
                self.close_locked()
                raise QrowdError("QueueUnavailable", "broker connection lost") from None
            if reply is None:
                self.close_locked()
                raise QrowdError("QueueUnavailable", "broker closed the connection")
            return reply

    def publish(self, env: Envelope) -> str:
        reply = self._call({"op": "publish", "env": env.to_doc()})
        if not reply.get("ok"):
            raise QrowdError(reply.get("code", "QueueUnavailable"), "publish rejected")
        return reply["messageId"]

    def subscribe(self, topic: str, subscriber: str) -> None:
        reply = self._call({"op": "subscribe", "topic": topic, "subscriber": subscriber})
        if not reply.get("ok"):
            raise QrowdError(reply.get("code", "QueueUnavailable"), "subscribe rejected")

    def close_locked(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self._reader = None

    def close(self) -> None:
        with self._lock:
            self.close_locked()


class SubscriberLink:
    """Persistent attach connection: receive event, handle, ack or reject.

    ``handle(env)`` must return normally for an ack; raising anything makes
    the link reject so the broker redelivers.
    """

    def __init__(self, address: tuple[str, int], subscriber: str, handle):
        self.subscriber = subscriber
        self.handle = handle
        self._sock = socket.create_connection(address, timeout=None)
        self._reader = self._sock.makefile("rb")
        write_frame(self._sock, {"op": "attach", "subscriber": subscriber})
        hello = read_frame(self._reader)
        if not hello or not hello.get("ok"):
            raise QrowdError("QueueUnavailable", "broker refused the attach")
        self._thread = threading.Thread(
            target=self._loop, name=f"sublink-{subscriber}", daemon=True
        )
        self._running = True
        self._thread.start()

    def _loop(self) -> None:
        while self._running:
            try:
                frame = read_frame(self._reader)
            except (OSError, ValueError, QrowdError):
                return
            if frame is None or frame.get("op") != "event":
                return
            env = Envelope.from_doc(frame["env"])
            try:
                self.handle(env)
                verdict = "ack"
            except Exception:
                verdict = "reject"
            try:
                write_frame(self._sock, {"op": verdict, "deliveryId": frame["deliveryId"]})
            except OSError:
                return

    def stop(self) -> None:
        self._running = False
        try:
            self._sock.close()
        except OSError:
            pass


class NetworkFabric(Fabric):
    """Fabric over real sockets; one HTTP host per instance, one broker."""

    def __init__(self, routing=None, default_timeout_ms: int = 5000,
                 retention: int = 10_000, retry_backoff: float = 0.05):
        super().__init__(routing, default_timeout_ms)
        self.daemon = BrokerDaemon(retention=retention, retry_backoff=retry_backoff)
        self._control = BrokerControlClient(self.daemon.address)
        self._hosts: dict[str, InstanceHost] = {}
        self._instances: dict[str, ServiceInstance] = {}
        self._links: list[SubscriberLink] = []
        self._lock = threading.Lock()
        self.event_delivery_timeout_s = 10.0

    # -- instance management ----------------------------------------------
    def register_instance(self, service, version: str = "v1", healthy: bool = True,
                          mode: str | None = None) -> ServiceInstance:
        host = InstanceHost()
        instance = ServiceInstance(service, host.endpoint, version=version, stats=self.stats)
        host.instance = instance
        with self._lock:
            self._hosts[host.endpoint] = host
            self._instances[host.endpoint] = instance
        if not self.routing.has_service(service.name):
            self.routing.declare(service.name, mode or "replicated")
        elif mode is not None:
            self.routing.declare(service.name, mode)
        self.routing.add_endpoint(service.name, host.endpoint, healthy=healthy)
        for topic in instance._topics:
            self._control.subscribe(topic, service.name)
        if instance._topics:
            link = SubscriberLink(
                self.daemon.address, service.name,
                lambda env, inst=instance: self._handle_event(inst, env),
            )
            with self._lock:
                self._links.append(link)
        if hasattr(service, "attach"):
            service.attach(self)
        return instance

    def instance_at(self, endpoint: str) -> ServiceInstance | None:
        with self._lock:
            return self._instances.get(endpoint)

    def deregister_instance(self, endpoint: str) -> None:
        with self._lock:
            instance = self._instances.pop(endpoint, None)
            host = self._hosts.pop(endpoint, None)
        if instance is not None:
            self.routing.remove_endpoint(instance.service.name, endpoint)
        if host is not None:
            host.stop()

    def _handle_event(self, instance: ServiceInstance, env: Envelope) -> None:
        pending = instance.deliver(env)
        try:
            pending.wait(self.event_delivery_timeout_s)
        except TimeoutError:
            raise FabricTimeout(env.route, int(self.event_delivery_timeout_s * 1000)) from None

    def subscribe_callable(self, topic: str, name: str, fn) -> None:
        """Bare-function subscriber; QrowdError acks-and-drops like instances."""
        self._control.subscribe(topic, name)

        def handle(env: Envelope) -> None:
            try:
                fn(env.payload, env)
            except QrowdError:
                return

        link = SubscriberLink(self.daemon.address, name, handle)
        with self._lock:
            self._links.append(link)

    # -- transport hooks ----------------------------------------------------
    def _send_request(self, endpoint: str, env: Envelope, timeout_ms: int) -> Envelope:
        parsed = urlparse(endpoint)
        body = env.to_bytes()
        conn = http.client.HTTPConnection(
            parsed.hostname, parsed.port, timeout=timeout_ms / 1000.0 + 2.0
        )
        try:
            conn.request("POST", "/envelope", body=body, headers={
                "Content-Type": "application/json",
                "X-Timeout-Ms": str(timeout_ms),
            })
            response = conn.getresponse()
            data = response.read()
        except (OSError, http.client.HTTPException) as exc:
            if isinstance(exc, socket.timeout):
                raise FabricTimeout(env.route, timeout_ms) from None
            raise NoHealthyInstance(env.service) from None
        finally:
            conn.close()
        if response.status == 504:
            raise FabricTimeout(env.route, timeout_ms)
        if response.status != 200:
            raise NoHealthyInstance(env.service)
        return Envelope.from_bytes(data)

    def _publish(self, env: Envelope) -> str:
        return self._control.publish(env)

    def _subscribe(self, topic: str, subscriber: str) -> None:
        self._control.subscribe(topic, subscriber)

    # -- lifecycle -----------------------------------------------------------
    def settle(self, timeout: float = 10.0) -> bool:
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.daemon.broker.pending() == 0 and self._inboxes_idle():
                time.sleep(0.05)
                if self.daemon.broker.pending() == 0 and self._inboxes_idle():
                    return True
            time.sleep(0.005)
        return False

    def _inboxes_idle(self) -> bool:
        with self._lock:
            instances = list(self._instances.values())
        return all(i.idle() for i in instances if i.alive())

    def stop(self) -> None:
        with self._lock:
            links = list(self._links)
            hosts = list(self._hosts.values())
            instances = list(self._instances.values())
            self._links.clear()
            self._hosts.clear()
            self._instances.clear()
        self.daemon.stop()
        self._control.close()
        for link in links:
            link.stop()
        for host in hosts:
            host.stop()
        for instance in instances:
            instance.stop()
