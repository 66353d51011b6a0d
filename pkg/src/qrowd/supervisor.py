"""Fleet controller: spawns instances, watches heartbeats, scales, redeploys.

After boot the supervisor is the only mutator of the routing table. Fleet
mutations are serialized under one lock; heartbeat collection runs on its
own thread and re-checks state under the lock before declaring anything
dead, so an instance being drained is never mistaken for a crash. An
instance counts as healthy only when its worker is alive and its health
route answers, both.
"""

from __future__ import annotations

import json
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .core import new_id, now_ms
from .errors import QrowdError
from .fabric.envelope import Envelope
from .services.base import Service, require, require_role

# terminal records are kept visible in status for a while, then trimmed
MAX_TERMINAL_RECORDS = 20
RATE_WINDOW_S = 10.0


@dataclass
class InstanceRecord:
    instance_id: str
    service: str
    endpoint: str
    state: str  # starting -> healthy -> (draining -> stopped | dead)
    version: str
    last_heartbeat: int
    instance: object = field(repr=False, default=None)
    misses: int = 0

    def to_doc(self) -> dict:
        return {
            "instanceId": self.instance_id,
            "service": self.service,
            "endpoint": self.endpoint,
            "state": self.state,
            "version": self.version,
            "lastHeartbeat": self.last_heartbeat,
        }


def load_fleet_config(path: str) -> dict:
    """Per-service limits and launch settings from a JSON fleet file."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    services = doc.get("services")
    if not isinstance(services, dict):
        raise QrowdError("MalformedFleetConfig", "fleet config needs a 'services' object")
    out = {}
    for name, spec in services.items():
        if not isinstance(spec, dict):
            raise QrowdError("MalformedFleetConfig", f"service {name!r} entry must be an object")
        lo = spec.get("min", 1)
        hi = spec.get("max", max(1, lo))
        command = spec.get("command")
        env = spec.get("env", {})
        if not isinstance(lo, int) or isinstance(lo, bool) or lo < 0:
            raise QrowdError("MalformedFleetConfig", f"{name}: min must be a non-negative integer")
        if not isinstance(hi, int) or isinstance(hi, bool) or hi < lo:
            raise QrowdError("MalformedFleetConfig", f"{name}: max must be an integer >= min")
        if command is not None and (
            not isinstance(command, list) or not all(isinstance(c, str) for c in command)
        ):
            raise QrowdError("MalformedFleetConfig", f"{name}: command must be a list of strings")
        if not isinstance(env, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in env.items()
        ):
            raise QrowdError("MalformedFleetConfig", f"{name}: env must map strings to strings")
        out[name] = {"min": lo, "max": hi, "command": command, "env": env}
    return out


class Supervisor(Service):
    name = "supervisor"
    mode = "singleton"

    def __init__(self, data, config, drain_timeout_s: float = 10.0,
                 ready_timeout_s: float = 5.0):
        super().__init__(data, config)
        self.drain_timeout_s = drain_timeout_s
        self.ready_timeout_s = ready_timeout_s
        self._fleet_lock = threading.RLock()
        self._managed: dict[str, Service] = {}
        self._limits: dict[str, dict] = {}
        self._desired: dict[str, int] = {}
        self._records: dict[str, list[InstanceRecord]] = {}
        self._restarts: dict[str, deque] = {}
        self._degraded: set[str] = set()
        self._rates: dict[str, deque] = {}
        self._stop_event = threading.Event()
        self._monitor: threading.Thread | None = None

    def operations(self):
        return {
            "status": self.op_status,
            "scale": self.op_scale,
            "redeploy": self.op_redeploy,
        }

    # fleet assembly -----------------------------------------------------------
    def manage(self, service: Service, desired: int, min_count: int = 1,
               max_count: int = 8, version: str = "v1") -> None:
        """Adopt a service: spawn its initial instances and enforce limits."""
        if service.mode == "singleton":
            max_count = 1
        with self._fleet_lock:
            self._managed[service.name] = service
            self._limits[service.name] = {"min": min_count, "max": max_count}
            self._desired[service.name] = desired
            self._records.setdefault(service.name, [])
            for _ in range(desired):
                record = self._spawn(service.name, version)
                if record.state != "healthy":
                    raise QrowdError(
                        "SpawnFailed", f"{service.name} instance failed its readiness probe")

    def start_monitor(self) -> None:
        if self._monitor is not None:
            return
        self._stop_event.clear()
        self._monitor = threading.Thread(
            target=self._monitor_loop, name="fleet-monitor", daemon=True)
        self._monitor.start()

    def stop_monitor(self) -> None:
        self._stop_event.set()
        if self._monitor is not None:
            self._monitor.join(timeout=5.0)
            self._monitor = None

    # operations ----------------------------------------------------------------
    def op_status(self, payload: dict) -> dict:
        only = payload.get("service")
        with self._fleet_lock:
            names = [only] if only else sorted(self._records)
            if only and only not in self._records:
                raise QrowdError("UnknownService", f"service {only!r} is not managed")
            fleet = []
            for name in names:
                fleet.append({
                    "service": name,
                    "mode": self._managed[name].mode,
                    "desired": self._desired[name],
                    "min": self._limits[name]["min"],
                    "max": self._limits[name]["max"],
                    "degraded": name in self._degraded,
                    "requestsPerSecond": self._rate(name),
                    "instances": [r.to_doc() for r in self._records[name]],
                })
            return {"fleet": fleet, "plan": dict(self._desired)}

    def op_scale(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        service = require(payload, "service")
        count = require(payload, "replicas", int)
        with self._fleet_lock:
            if service not in self._managed:
                raise QrowdError("UnknownService", f"service {service!r} is not managed")
            limits = self._limits[service]
            if count < limits["min"] or count > limits["max"]:
                raise QrowdError(
                    "CapExceeded",
                    f"{service} allows between {limits['min']} and {limits['max']} instances")
            live = self._live(service)
            version = live[-1].version if live else "v1"
            while len(live) < count:
                record = self._spawn(service, version)
                if record.state != "healthy":
                    raise QrowdError(
                        "SpawnFailed", f"{service} instance failed its readiness probe")
                live.append(record)
            for record in list(reversed(live))[: len(live) - count]:
                self._drain_one(record)
            self._desired[service] = count
            self._degraded.discard(service)
            self._trim_terminal(service)
            return {"plan": dict(self._desired)}

    def op_redeploy(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        service = require(payload, "service")
        with self._fleet_lock:
            if service not in self._managed:
                raise QrowdError("UnknownService", f"service {service!r} is not managed")
            olds = self._live(service)
            if not olds:
                raise QrowdError("ValidationFailed", f"{service} has no running instances")
            version = payload.get("version") or self._next_version(service)
            started = time.monotonic()
            failed_before = self._failure_count()
            # one at a time: the new instance must prove healthy before an
            # old one loses its place, so the healthy set never empties
            for old in olds:
                record = self._spawn(service, version)
                if record.state != "healthy":
                    raise QrowdError(
                        "NewVersionUnhealthy",
                        f"{service} {version} failed its readiness probe; fleet unchanged")
                self._drain_one(old)
            self._degraded.discard(service)
            self._trim_terminal(service)
            return {
                "service": service,
                "version": version,
                "replaced": len(olds),
                "failedRequests": self._failure_count() - failed_before,
                "durationMs": int((time.monotonic() - started) * 1000),
            }

    # instance lifecycle ---------------------------------------------------------
    def _live(self, service: str) -> list[InstanceRecord]:
        return [r for r in self._records[service] if r.state in ("starting", "healthy")]

    def _spawn(self, service: str, version: str) -> InstanceRecord:
        svc = self._managed[service]
        # registered unhealthy: the endpoint joins dispatch only after the probe
        instance = self.fabric.register_instance(
            svc, version=version, healthy=False, mode=svc.mode)
        record = InstanceRecord(
            instance_id=new_id(), service=service, endpoint=instance.endpoint,
            state="starting", version=version, last_heartbeat=now_ms(),
            instance=instance)
        self._records[service].append(record)
        if self._await_ready(record):
            self.fabric.routing.set_healthy(service, record.endpoint, True)
            record.state = "healthy"
            record.last_heartbeat = now_ms()
        else:
            self._discard(record)
        return record

    def _await_ready(self, record: InstanceRecord) -> bool:
        deadline = time.monotonic() + self.ready_timeout_s
        while True:
            verdict = self._probe(record)
            if verdict is not None:
                return verdict
            if time.monotonic() >= deadline:
                return False

    def _probe(self, record: InstanceRecord, timeout_s: float | None = None) -> bool | None:
        """True/False on a definitive answer, None when the probe timed out."""
        env = Envelope(route=f"{record.service}.health", payload={},
                       kind="request", sender_service="supervisor")
        try:
            pending = record.instance.deliver(Envelope.from_bytes(env.to_bytes()))
            reply = pending.wait(timeout_s or self.config.heartbeat_interval_s)
        except TimeoutError:
            return None
        except QrowdError:
            return False
        if reply is None or reply.kind != "reply":
            return False
        return reply.payload.get("status") == "ok"

    def _drain_one(self, record: InstanceRecord) -> None:
        record.state = "draining"
        try:
            self.fabric.routing.set_healthy(record.service, record.endpoint, False)
        except QrowdError:
            pass
        record.instance.drain(self.drain_timeout_s)
        self.fabric.deregister_instance(record.endpoint)
        record.state = "stopped"

    def _discard(self, record: InstanceRecord) -> None:
        record.instance.stop()
        self.fabric.deregister_instance(record.endpoint)
        record.state = "dead"

    def _next_version(self, service: str) -> str:
        numbered = [
            int(m.group(1))
            for r in self._records[service]
            for m in [re.fullmatch(r"v(\d+)", r.version)]
            if m is not None
        ]
        return f"v{max(numbered) + 1}" if numbered else "v2"

    def _trim_terminal(self, service: str) -> None:
        records = self._records[service]
        terminal = [r for r in records if r.state in ("stopped", "dead")]
        for record in terminal[: max(0, len(terminal) - MAX_TERMINAL_RECORDS)]:
            records.remove(record)

    def _failure_count(self) -> int:
        stats = self.fabric.stats
        return stats.timeouts + stats.no_healthy_errors

    # heartbeat collection --------------------------------------------------------
    def _monitor_loop(self) -> None:
        while not self._stop_event.wait(self.config.heartbeat_interval_s):
            try:
                self._tick()
            except Exception:
                # the monitor must survive anything a probe can throw
                continue

    def _tick(self) -> None:
        with self._fleet_lock:
            live = [r for recs in self._records.values() for r in recs if r.state == "healthy"]
            totals = {name: self.fabric.stats.dispatch_total(name) for name in self._records}
        now = time.monotonic()
        for name, total in totals.items():
            self._rates.setdefault(name, deque(maxlen=256)).append((now, total))
        for record in live:
            ok = record.instance.alive() and self._probe(record) is True
            with self._fleet_lock:
                if record.state != "healthy":
                    continue
                if ok:
                    record.last_heartbeat = now_ms()
                    record.misses = 0
                    continue
                record.misses += 1
                if record.misses >= self.config.heartbeat_misses:
                    self._declare_dead(record)

    def _declare_dead(self, record: InstanceRecord) -> None:
        record.state = "dead"
        try:
            self.fabric.routing.set_healthy(record.service, record.endpoint, False)
        except QrowdError:
            pass
        record.instance.stop()
        self.fabric.deregister_instance(record.endpoint)
        window = self._restarts.setdefault(record.service, deque())
        now = time.monotonic()
        while window and now - window[0] > self.config.restart_window_s:
            window.popleft()
        if len(window) >= self.config.restart_budget:
            self._degraded.add(record.service)
            return
        window.append(now)
        replacement = self._spawn(record.service, record.version)
        if replacement.state == "healthy":
            self._degraded.discard(record.service)
        else:
            self._degraded.add(record.service)

    def _rate(self, service: str) -> float:
        samples = self._rates.get(service)
        if not samples or len(samples) < 2:
            return 0.0
        now = time.monotonic()
        recent = [(t, total) for t, total in samples if now - t <= RATE_WINDOW_S]
        if len(recent) < 2:
            recent = list(samples)[-2:]
        (t0, c0), (t1, c1) = recent[0], recent[-1]
        if t1 <= t0:
            return 0.0
        return round((c1 - c0) / (t1 - t0), 2)
