"""Platform error model.

Domain errors carry a stable string ``code`` that travels over the fabric
inside error envelopes and is mapped to an HTTP status at the gateway.
Fabric-level failures get their own subclasses so callers can distinguish
transport problems from domain rejections.
"""

from __future__ import annotations


class QrowdError(Exception):
    """A domain or platform error with a stable machine-readable code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code
        self.message = message or code

    def to_doc(self) -> dict:
        return {"code": self.code, "message": self.message}


class NoSuchRoute(QrowdError):
    def __init__(self, route: str):
        super().__init__("NoSuchRoute", f"no handler registered for route {route!r}")
        self.route = route


class FabricTimeout(QrowdError):
    def __init__(self, route: str, timeout_ms: int):
        super().__init__("Timeout", f"no reply from {route!r} within {timeout_ms} ms")
        self.route = route


class HandlerError(QrowdError):
    """A domain error propagated from a remote handler, code preserved."""


class NoHealthyInstance(QrowdError):
    def __init__(self, service: str):
        super().__init__("NoHealthyInstance", f"service {service!r} has no healthy instance")
        self.service = service


class QueueUnavailable(QrowdError):
    def __init__(self, message: str = "event queue unavailable"):
        super().__init__("QueueUnavailable", message)
