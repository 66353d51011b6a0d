"""Common service scaffolding.

A service is a plain object exposing ``routes()`` (operation name -> request
handler) and ``topics()`` (topic -> event handler). Instances of one service
process their inbox serially; anything shared across instances lives in the
data layer, never on the service object (singleton services are the stated
exception and may cache).
"""

from __future__ import annotations

from collections import OrderedDict

from ..core import Clock, new_id
from ..errors import QrowdError

_EVENT_DEDUP_CAPACITY = 4096


def require(payload: dict, field: str, kind: type | tuple = str, message: str | None = None):
    """Pull a required field out of a request payload with a stable error."""
    value = payload.get(field)
    if value is None:
        raise QrowdError("ValidationFailed", message or f"missing field {field!r}")
    if kind is int and isinstance(value, bool):
        raise QrowdError("ValidationFailed", message or f"field {field!r} must be an integer")
    if not isinstance(value, kind):
        raise QrowdError("ValidationFailed", message or f"field {field!r} has the wrong type")
    return value


def require_role(payload: dict, role: str) -> None:
    if payload.get("role") != role:
        raise QrowdError("AccessDenied", f"operation requires role {role!r}")


class Service:
    """Base class: wires the data layer, a per-service clock, and the fabric."""

    name = "service"
    mode = "replicated"

    def __init__(self, data, config):
        self.data = data
        self.config = config
        self.clock = Clock()
        self.fabric = None
        self._handled_events: OrderedDict[str, bool] = OrderedDict()

    # fabric integration ---------------------------------------------------
    def attach(self, fabric) -> None:
        self.fabric = fabric

    def routes(self) -> dict:
        return {"health": self.op_health, **self.operations()}

    def operations(self) -> dict:
        return {}

    def topics(self) -> dict:
        return {}

    def op_health(self, payload: dict) -> dict:
        return {"status": "ok", "service": self.name}

    def publish(self, topic: str, payload: dict) -> None:
        # Detached services (direct unit tests) skip emission; the platform
        # wiring always attaches before any traffic flows.
        if self.fabric is not None:
            self.fabric.publish(topic, payload, sender=self.name)

    def event_seen(self, env) -> bool:
        """In-memory at-least-once dedup on messageId.

        Only safe for singleton services; replicated consumers must dedup
        through the data layer instead (put_if_absent claims).
        """
        if env.message_id in self._handled_events:
            return True
        self._handled_events[env.message_id] = True
        if len(self._handled_events) > _EVENT_DEDUP_CAPACITY:
            self._handled_events.popitem(last=False)
        return False

    # domain events ----------------------------------------------------------
    def emit_interaction(self, kind: str, user_id: str, session_id: str | None = None,
                         task_id: str | None = None, marker_id: str | None = None,
                         at: int | None = None) -> dict:
        event = {
            "eventId": new_id(),
            "kind": kind,
            "userId": user_id,
            "sessionId": session_id or new_id(),
            "at": at if at is not None else self.clock.next(),
        }
        if task_id is not None:
            event["taskId"] = task_id
        if marker_id is not None:
            event["markerId"] = marker_id
        self.publish("interaction", event)
        return event
