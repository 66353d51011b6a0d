"""In-process transport: instances live in this process, wire hops are
codec round-trips.

Every envelope still passes through the canonical byte encoding at the
delivery boundary, so payload aliasing is impossible and semantics match
the networked transport exactly.
"""

from __future__ import annotations

import threading
from typing import Callable

from ..errors import FabricTimeout, NoHealthyInstance, QrowdError
from .base import Fabric, ServiceInstance
from .broker import Broker
from .envelope import Envelope
from .routing import RoutingTable


class InProcessFabric(Fabric):
    def __init__(self, routing: RoutingTable | None = None, default_timeout_ms: int = 5000,
                 retention: int = 10_000, retry_backoff: float = 0.05):
        super().__init__(routing, default_timeout_ms)
        self._instances: dict[str, ServiceInstance] = {}
        self._instances_lock = threading.Lock()
        self._callables: dict[str, Callable[[dict, Envelope], None]] = {}
        self._counter = 0
        self.broker = Broker(self._deliver_event, retention=retention, retry_backoff=retry_backoff)
        self.event_delivery_timeout_s = 10.0

    # -- instance management ----------------------------------------------
    def register_instance(self, service, endpoint: str | None = None, version: str = "v1",
                          healthy: bool = True, mode: str | None = None) -> ServiceInstance:
        with self._instances_lock:
            self._counter += 1
            if endpoint is None:
                endpoint = f"inproc://{service.name}-{self._counter}"
            instance = ServiceInstance(service, endpoint, version=version, stats=self.stats)
            self._instances[endpoint] = instance
        if not self.routing.has_service(service.name):
            self.routing.declare(service.name, mode or "replicated")
        elif mode is not None:
            self.routing.declare(service.name, mode)
        self.routing.add_endpoint(service.name, endpoint, healthy=healthy)
        for topic in instance._topics:
            self.broker.subscribe(topic, service.name)
        if hasattr(service, "attach"):
            service.attach(self)
        return instance

    def instance_at(self, endpoint: str) -> ServiceInstance | None:
        with self._instances_lock:
            return self._instances.get(endpoint)

    def deregister_instance(self, endpoint: str) -> None:
        with self._instances_lock:
            instance = self._instances.pop(endpoint, None)
        if instance is not None:
            self.routing.remove_endpoint(instance.service.name, endpoint)

    # -- transport hooks ----------------------------------------------------
    def _send_request(self, endpoint: str, env: Envelope, timeout_ms: int) -> Envelope:
        instance = self.instance_at(endpoint)
        if instance is None:
            raise NoHealthyInstance(env.service)
        wire = Envelope.from_bytes(env.to_bytes())
        try:
            pending = instance.deliver(wire)
        except QrowdError:
            raise NoHealthyInstance(env.service)
        try:
            reply = pending.wait(timeout_ms / 1000.0)
        except TimeoutError:
            raise FabricTimeout(env.route, timeout_ms) from None
        assert reply is not None
        return Envelope.from_bytes(reply.to_bytes())

    def _publish(self, env: Envelope) -> str:
        return self.broker.publish(Envelope.from_bytes(env.to_bytes()))

    def _subscribe(self, topic: str, subscriber: str) -> None:
        self.broker.subscribe(topic, subscriber)

    def subscribe_callable(self, topic: str, name: str, fn: Callable[[dict, Envelope], None]) -> None:
        """Register a bare-function subscriber (used by the gateway and tests)."""
        self._callables[name] = fn
        self.broker.subscribe(topic, name)

    def _deliver_event(self, subscriber: str, env: Envelope) -> None:
        fn = self._callables.get(subscriber)
        wire = Envelope.from_bytes(env.to_bytes())
        if fn is not None:
            try:
                fn(wire.payload, wire)
            except QrowdError:
                return
            return
        endpoint = self.dispatch_balanced(subscriber, wire)
        instance = self.instance_at(endpoint)
        if instance is None:
            raise NoHealthyInstance(subscriber)
        pending = instance.deliver(wire)
        try:
            pending.wait(self.event_delivery_timeout_s)
        except TimeoutError:
            raise FabricTimeout(env.route, int(self.event_delivery_timeout_s * 1000)) from None

    # -- lifecycle -----------------------------------------------------------
    def settle(self, timeout: float = 10.0) -> bool:
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.broker.pending() == 0 and self._inboxes_idle():
                # double-check after a short grace period: a handler may be
                # about to publish a follow-up event
                time.sleep(0.02)
                if self.broker.pending() == 0 and self._inboxes_idle():
                    return True
            time.sleep(0.005)
        return False

    def _inboxes_idle(self) -> bool:
        with self._instances_lock:
            instances = list(self._instances.values())
        return all(i.idle() for i in instances if i.alive())

    def stop(self) -> None:
        self.broker.stop()
        with self._instances_lock:
            instances = list(self._instances.values())
            self._instances.clear()
        for instance in instances:
            instance.stop()
