"""The universal inter-service message wrapper.

Every request, reply, event, and error crossing a service boundary is an
Envelope. Both transports (in-process and networked) serialize envelopes
with the same canonical encoding, so identical inputs produce byte-identical
wire forms regardless of transport.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..core import canonical_json, from_json, new_id, now_ms

KINDS = ("request", "reply", "event", "error")


@dataclass
class Envelope:
    route: str
    payload: dict
    kind: str = "request"
    message_id: str = field(default_factory=new_id)
    correlation_id: str = ""
    sender_service: str = ""
    sent_at: int = field(default_factory=now_ms)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown envelope kind: {self.kind!r}")
        if not self.route or ("." not in self.route and self.kind in ("request", "reply", "error")):
            raise ValueError(f"route must be non-empty dot-separated: {self.route!r}")
        if not isinstance(self.payload, dict):
            raise ValueError("payload must be a document")
        if not self.correlation_id:
            self.correlation_id = self.message_id

    @property
    def service(self) -> str:
        return self.route.split(".", 1)[0]

    @property
    def operation(self) -> str:
        parts = self.route.split(".", 1)
        return parts[1] if len(parts) > 1 else ""

    def reply(self, payload: dict, kind: str = "reply") -> "Envelope":
        """Build the reply envelope; correlationId echoes this request's messageId."""
        return Envelope(
            route=self.route,
            payload=payload,
            kind=kind,
            correlation_id=self.message_id,
            sender_service=self.service,
        )

    def to_doc(self) -> dict:
        return {
            "messageId": self.message_id,
            "correlationId": self.correlation_id,
            "route": self.route,
            "senderService": self.sender_service,
            "sentAt": self.sent_at,
            "payload": self.payload,
            "kind": self.kind,
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_doc())

    @classmethod
    def from_doc(cls, doc: dict) -> "Envelope":
        return cls(
            route=doc["route"],
            payload=doc["payload"],
            kind=doc["kind"],
            message_id=doc["messageId"],
            correlation_id=doc["correlationId"],
            sender_service=doc.get("senderService", ""),
            sent_at=doc.get("sentAt", 0),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        doc = from_json(data)
        if not isinstance(doc, dict):
            raise ValueError("envelope must be a JSON object")
        return cls.from_doc(doc)
