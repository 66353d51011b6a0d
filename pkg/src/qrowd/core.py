"""Shared vocabulary types: identifiers, timestamps, coordinates, roles.

Every service builds on these. All values are immutable and safe to share
between threads. The canonical serialized form of every platform document
is UTF-8 JSON with lowerCamelCase field names and timestamps as integer
milliseconds since the Unix epoch (UTC).
"""

from __future__ import annotations

import json
import math
import re
import secrets
import threading
import time
from dataclasses import dataclass
from enum import Enum

_HEX_ID_RE = re.compile(r"^[0-9a-f]{32}$")


def new_id() -> str:
    """Fresh 128-bit random identifier, rendered as 32 lowercase hex chars.

    Services mint ids independently; collision probability is negligible,
    so no coordination or central sequencer is needed.
    """
    return secrets.token_hex(16)


def is_id(value: object) -> bool:
    return isinstance(value, str) and bool(_HEX_ID_RE.match(value))


def parse_id(value: str) -> str:
    """Validate and return the canonical rendering of an identifier."""
    if not is_id(value):
        raise ValueError(f"not a valid entity id: {value!r}")
    return value


def now_ms() -> int:
    """Current wall-clock time in integer milliseconds since the epoch."""
    return time.time_ns() // 1_000_000


class Clock:
    """Millisecond clock that is strictly increasing within one source.

    Wall clocks can repeat a millisecond under load; event emitters use a
    Clock so per-source timestamps never go backwards.
    """

    def __init__(self) -> None:
        self._last = 0
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            self._last = max(self._last + 1, now_ms())
            return self._last


class Role(str, Enum):
    PARTICIPANT = "participant"
    RESEARCHER = "researcher"

    @classmethod
    def parse(cls, value: str) -> "Role":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown role: {value!r}") from None


@dataclass(frozen=True)
class GeoPoint:
    """WGS-84-style position in decimal degrees, range-checked at construction."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (isinstance(self.lat, (int, float)) and isinstance(self.lon, (int, float))):
            raise ValueError("lat/lon must be numbers")
        if isinstance(self.lat, bool) or isinstance(self.lon, bool):
            raise ValueError("lat/lon must be numbers")
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("lat/lon must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat out of range [-90, 90]: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"lon out of range [-180, 180]: {self.lon}")

    def to_doc(self) -> dict:
        return {"lat": float(self.lat), "lon": float(self.lon)}

    @classmethod
    def from_doc(cls, doc: dict) -> "GeoPoint":
        if not isinstance(doc, dict):
            raise ValueError("position must be an object with lat/lon")
        return cls(doc.get("lat"), doc.get("lon"))


def email_invalid_reason(value: object) -> str | None:
    """Why ``value`` is not an acceptable email address, or None if it is.

    Purely syntactic: local-part@domain with a dotted domain. Never raises.
    """
    if not isinstance(value, str):
        return "not a string"
    if value == "":
        return "empty"
    if any(c.isspace() for c in value):
        return "contains whitespace"
    if value.count("@") != 1:
        return "must contain exactly one @"
    local, domain = value.split("@")
    if not local:
        return "empty local part"
    if "." not in domain:
        return "no dotted domain"
    if any(not label for label in domain.split(".")):
        return "empty domain label"
    return None


def is_valid_email(value: object) -> bool:
    return email_invalid_reason(value) is None


def canonical_json(doc: object) -> bytes:
    """Canonical wire encoding: sorted keys, no whitespace, UTF-8."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def from_json(data: bytes | str) -> object:
    return json.loads(data)
