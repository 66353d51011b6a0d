"""Transport-independent fabric machinery.

A ServiceInstance wraps one service object with a serial inbox: envelopes
are processed one at a time in arrival order, which gives every service
the per-instance serialization its concurrency model assumes. The Fabric
base class owns routing, stats, and the request/publish surface; concrete
transports implement only the wire hop.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import Counter, OrderedDict, deque

from ..errors import FabricTimeout, HandlerError, NoSuchRoute, QrowdError
from .broker import Broker
from .envelope import Envelope
from .routing import RoutingTable

DEFAULT_TIMEOUT_MS = 5000
_DEDUP_CAPACITY = 2048


class FabricStats:
    """Thread-safe counters plus bounded traces for invariant checks."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.requests_total = 0
        self.requests_failed = 0
        self.no_healthy_errors = 0
        self.timeouts = 0
        self.late_replies_discarded = 0
        self.dispatch_trace: deque[tuple[str, str]] = deque(maxlen=200_000)
        self.message_trace: deque[tuple[str, str, str, str]] = deque(maxlen=200_000)
        self.dispatch_totals: Counter = Counter()

    def record_dispatch(self, service: str, endpoint: str) -> None:
        with self._lock:
            self.dispatch_trace.append((service, endpoint))
            self.dispatch_totals[service] += 1

    def dispatch_total(self, service: str) -> int:
        with self._lock:
            return self.dispatch_totals[service]

    def record_message(self, kind: str, message_id: str, correlation_id: str, route: str) -> None:
        with self._lock:
            self.message_trace.append((kind, message_id, correlation_id, route))

    def count(self, field: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, field, getattr(self, field) + n)

    def dispatch_counts(self, service: str) -> Counter:
        with self._lock:
            return Counter(e for s, e in self.dispatch_trace if s == service)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requestsTotal": self.requests_total,
                "requestsFailed": self.requests_failed,
                "noHealthyErrors": self.no_healthy_errors,
                "timeouts": self.timeouts,
                "lateRepliesDiscarded": self.late_replies_discarded,
            }


class _Pending:
    """One-shot result slot; abandoning it lets late replies be detected."""

    def __init__(self) -> None:
        self._event = threading.Event()
        self._lock = threading.Lock()
        self.reply: Envelope | None = None
        self.error: Exception | None = None
        self.abandoned = False

    def resolve(self, reply: Envelope | None = None, error: Exception | None = None) -> bool:
        """Returns False if the waiter already gave up (late reply)."""
        with self._lock:
            self.reply = reply
            self.error = error
            late = self.abandoned
        self._event.set()
        return not late

    def wait(self, timeout_s: float) -> Envelope | None:
        if not self._event.wait(timeout_s):
            with self._lock:
                if not self._event.is_set():
                    self.abandoned = True
                    raise TimeoutError()
        if self.error is not None:
            raise self.error
        return self.reply


class ServiceInstance:
    """A single running instance: serial worker over an envelope inbox."""

    def __init__(self, service, endpoint: str, version: str = "v1", stats: FabricStats | None = None):
        self.service = service
        self.endpoint = endpoint
        self.version = version
        self.stats = stats
        self._routes = dict(service.routes())
        self._topics = dict(service.topics()) if hasattr(service, "topics") else {}
        self._inbox: queue.Queue = queue.Queue()
        self._seen: OrderedDict[str, Envelope] = OrderedDict()
        self._state = "running"
        self._state_lock = threading.Lock()
        self._worker = threading.Thread(target=self._run, name=f"instance-{endpoint}", daemon=True)
        self._worker.start()

    @property
    def state(self) -> str:
        with self._state_lock:
            return self._state

    def alive(self) -> bool:
        return self._worker.is_alive() and self.state in ("running", "draining")

    def deliver(self, env: Envelope) -> _Pending:
        with self._state_lock:
            if self._state in ("stopped", "killed"):
                raise QrowdError("InstanceStopped", f"instance {self.endpoint} is {self._state}")
        pending = _Pending()
        self._inbox.put((env, pending))
        return pending

    def _run(self) -> None:
        while True:
            item = self._inbox.get()
            if item is None:
                return
            env, pending = item
            if self.state == "killed":
                return
            try:
                self._process(env, pending)
            finally:
                self._inbox.task_done()

    def _process(self, env: Envelope, pending: _Pending) -> None:
        if env.kind == "request":
            cached = self._seen.get(env.message_id)
            if cached is not None:
                pending.resolve(reply=cached)
                return
            reply = self._invoke_route(env)
            self._remember(env.message_id, reply)
            delivered = pending.resolve(reply=reply)
            if not delivered and self.stats is not None:
                self.stats.count("late_replies_discarded")
        elif env.kind == "event":
            handler = self._topics.get(env.route)
            try:
                if handler is not None:
                    handler(env.payload, env)
                pending.resolve(reply=None)
            except QrowdError:
                # Domain rejection of an event: ack and drop, never poison the queue.
                pending.resolve(reply=None)
            except Exception as exc:  # transient failure -> redelivery
                pending.resolve(error=exc)
        else:
            pending.resolve(error=QrowdError("BadEnvelope", f"cannot deliver kind {env.kind!r}"))

    def _invoke_route(self, env: Envelope) -> Envelope:
        handler = self._routes.get(env.operation)
        if handler is None:
            return env.reply(NoSuchRoute(env.route).to_doc(), kind="error")
        try:
            result = handler(env.payload)
            return env.reply(result if isinstance(result, dict) else {}, kind="reply")
        except QrowdError as exc:
            return env.reply(exc.to_doc(), kind="error")
        except Exception as exc:
            return env.reply({"code": "InternalError", "message": str(exc)}, kind="error")

    def _remember(self, message_id: str, reply: Envelope) -> None:
        self._seen[message_id] = reply
        if len(self._seen) > _DEDUP_CAPACITY:
            self._seen.popitem(last=False)

    def idle(self) -> bool:
        return self._inbox.unfinished_tasks == 0

    def drain(self, timeout_s: float = 10.0) -> None:
        """Finish queued work, then stop. Callers must stop dispatching first."""
        with self._state_lock:
            if self._state == "running":
                self._state = "draining"
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline and self._inbox.unfinished_tasks > 0:
            time.sleep(0.005)
        self.stop()

    def stop(self) -> None:
        with self._state_lock:
            if self._state in ("stopped", "killed"):
                return
            self._state = "stopped"
        self._inbox.put(None)

    def kill(self) -> None:
        """Simulate a crash: abandon queued work immediately."""
        with self._state_lock:
            self._state = "killed"
        self._inbox.put(None)


class Fabric:
    """Shared request/publish surface; subclasses implement the transport hop."""

    def __init__(self, routing: RoutingTable | None = None, default_timeout_ms: int = DEFAULT_TIMEOUT_MS):
        self.routing = routing or RoutingTable()
        self.stats = FabricStats()
        self.default_timeout_ms = default_timeout_ms
        self.route_timeouts: dict[str, int] = {}

    # -- transport hooks -------------------------------------------------
    def _send_request(self, endpoint: str, env: Envelope, timeout_ms: int) -> Envelope:
        raise NotImplementedError

    def _publish(self, env: Envelope) -> str:
        raise NotImplementedError

    def _subscribe(self, topic: str, subscriber: str) -> None:
        raise NotImplementedError

    # -- public surface ---------------------------------------------------
    def request(self, route: str, payload: dict, timeout_ms: int | None = None, sender: str = "client") -> dict:
        if timeout_ms is None:
            timeout_ms = self.route_timeouts.get(route, self.default_timeout_ms)
        if timeout_ms <= 0:
            raise QrowdError("BadTimeout", "timeoutMs must be > 0")
        service = route.split(".", 1)[0]
        if not self.routing.has_service(service):
            self.stats.count("requests_failed")
            raise NoSuchRoute(route)
        env = Envelope(route=route, payload=payload, kind="request", sender_service=sender)
        self.stats.count("requests_total")
        self.stats.record_message("request", env.message_id, env.correlation_id, route)
        try:
            endpoint = self.dispatch_balanced(service, env)
            reply = self._send_request(endpoint, env, timeout_ms)
        except FabricTimeout:
            self.stats.count("requests_failed")
            self.stats.count("timeouts")
            raise
        except QrowdError as exc:
            self.stats.count("requests_failed")
            if exc.code == "NoHealthyInstance":
                self.stats.count("no_healthy_errors")
            raise
        self.stats.record_message(reply.kind, reply.message_id, reply.correlation_id, reply.route)
        if reply.correlation_id != env.message_id:
            self.stats.count("requests_failed")
            raise QrowdError("CorrelationMismatch", "reply does not correlate with request")
        if reply.kind == "error":
            payload = reply.payload
            self.stats.count("requests_failed")
            raise HandlerError(payload.get("code", "InternalError"), payload.get("message", ""))
        return reply.payload

    def dispatch_balanced(self, service: str, env: Envelope) -> str:
        """Pick the next healthy endpoint round-robin; records the choice."""
        endpoint = self.routing.choose(service)
        self.stats.record_dispatch(service, endpoint)
        return endpoint

    def publish(self, topic: str, payload: dict, sender: str = "client") -> str:
        env = Envelope(route=topic, payload=payload, kind="event", sender_service=sender)
        self.stats.record_message("event", env.message_id, env.correlation_id, topic)
        return self._publish(env)

    def subscribe(self, topic: str, subscriber: str) -> None:
        self._subscribe(topic, subscriber)

    def settle(self, timeout: float = 10.0) -> bool:
        """Wait for all asynchronous work to drain (event queues, inboxes)."""
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError
