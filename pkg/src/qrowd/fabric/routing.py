"""Static routing table with round-robin dispatch over healthy endpoints.

Service discovery is deliberately absent: services and their endpoints are
declared in a config file loaded at startup, and the supervisor mutates the
table as instances come and go.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

from ..errors import NoHealthyInstance, QrowdError

MODES = ("singleton", "replicated")


@dataclass
class ServiceEntry:
    mode: str = "replicated"
    endpoints: list[str] = field(default_factory=list)
    healthy: dict[str, bool] = field(default_factory=dict)
    counter: int = 0


class RoutingTable:
    """Service name -> ordered endpoints, with per-endpoint health flags.

    ``choose`` walks the healthy subset round-robin: over N*k dispatches to
    k healthy endpoints each receives exactly N.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, ServiceEntry] = {}

    def declare(self, service: str, mode: str = "replicated") -> None:
        if mode not in MODES:
            raise QrowdError("MalformedRoutingTable", f"unknown mode {mode!r} for {service!r}")
        with self._lock:
            entry = self._entries.setdefault(service, ServiceEntry())
            entry.mode = mode

    def services(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def mode(self, service: str) -> str:
        with self._lock:
            entry = self._entries.get(service)
            if entry is None:
                raise QrowdError("UnknownService", f"service {service!r} not in routing table")
            return entry.mode

    def has_service(self, service: str) -> bool:
        with self._lock:
            return service in self._entries

    def add_endpoint(self, service: str, endpoint: str, healthy: bool = True) -> None:
        with self._lock:
            entry = self._entries.setdefault(service, ServiceEntry())
            if endpoint in entry.endpoints:
                raise QrowdError("DuplicateEndpoint", f"{endpoint!r} already registered for {service!r}")
            entry.endpoints.append(endpoint)
            entry.healthy[endpoint] = healthy

    def remove_endpoint(self, service: str, endpoint: str) -> None:
        with self._lock:
            entry = self._entries.get(service)
            if entry is None or endpoint not in entry.endpoints:
                return
            entry.endpoints.remove(endpoint)
            entry.healthy.pop(endpoint, None)

    def set_healthy(self, service: str, endpoint: str, healthy: bool) -> None:
        with self._lock:
            entry = self._entries.get(service)
            if entry is None or endpoint not in entry.healthy:
                raise QrowdError("UnknownService", f"{service!r}/{endpoint!r} not registered")
            entry.healthy[endpoint] = healthy

    def endpoints(self, service: str, healthy_only: bool = False) -> list[str]:
        with self._lock:
            entry = self._entries.get(service)
            if entry is None:
                return []
            if healthy_only:
                return [e for e in entry.endpoints if entry.healthy.get(e)]
            return list(entry.endpoints)

    def choose(self, service: str) -> str:
        """Round-robin over the healthy subset; unhealthy endpoints are skipped."""
        with self._lock:
            entry = self._entries.get(service)
            if entry is None:
                raise QrowdError("UnknownService", f"service {service!r} not in routing table")
            healthy = [e for e in entry.endpoints if entry.healthy.get(e)]
            if not healthy:
                raise NoHealthyInstance(service)
            chosen = healthy[entry.counter % len(healthy)]
            entry.counter += 1
            return chosen

    def to_doc(self) -> dict:
        with self._lock:
            return {
                name: {
                    "mode": entry.mode,
                    "endpoints": list(entry.endpoints),
                    "healthy": dict(entry.healthy),
                }
                for name, entry in self._entries.items()
            }

    @classmethod
    def from_doc(cls, doc: dict) -> "RoutingTable":
        table = cls()
        for service, spec in doc.items():
            table.declare(service, spec.get("mode", "replicated"))
            for endpoint in spec.get("endpoints", []):
                healthy = spec.get("healthy", {}).get(endpoint, True)
                table.add_endpoint(service, endpoint, healthy=healthy)
        return table

    @classmethod
    def load(cls, path: str) -> "RoutingTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_doc(), fh, indent=2, sort_keys=True)
