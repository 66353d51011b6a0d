"""Platform assembly: collections, ACL grants, services, and fabric wiring.

This is the single place that knows the full collection/ACL matrix. Each
service only ever names its own collections; cross-service reads (reporting
over metrics rows, the task service checking marker existence) are explicit
grants here, so the bounded contexts stay auditable in one table.
"""

from __future__ import annotations

from .config import PlatformConfig
from .datalayer import DataLayer, SchemaDescriptor
from .fabric import InProcessFabric
from .services import (
    AuthService,
    EsmService,
    LocationService,
    MetricsService,
    ReportingService,
    RewardService,
    TaskService,
)
from .supervisor import Supervisor, load_fleet_config

_RW = {"read": True, "write": True}
_R = {"read": True, "write": False}


def _schemas() -> list[SchemaDescriptor]:
    def desc(collection, fields, acl):
        return SchemaDescriptor(collection=collection, version=1, fields=fields, acl=acl)

    req = lambda t: {"type": t, "required": True}
    opt = lambda t: {"type": t, "required": False}

    return [
        desc("users", {
            "userId": req("string"), "email": req("string"),
            "passwordHash": req("string"), "role": req("string"),
            "createdAt": req("timestamp"),
        }, {"auth": _RW}),
        desc("emailIndex", {"userId": req("string")}, {"auth": _RW}),
        desc("userStats", {
            "userId": req("string"), "tasksCompleted": req("int"),
            "creditsEarned": req("int"),
        }, {"auth": _RW}),
        desc("markers", {
            "markerId": req("string"), "name": req("string"),
            "position": req("map"), "qrPayload": req("string"),
            "active": req("bool"),
        }, {"location": _RW, "task": _R}),
        desc("tasks", {
            "taskId": req("string"), "title": req("string"),
            "description": opt("string"), "difficulty": req("string"),
            "responseType": req("string"), "rewardAmount": req("int"),
            "markerIds": req("list"), "status": req("string"),
            "createdAt": req("timestamp"),
        }, {"task": _RW}),
        desc("responses", {
            "responseId": req("string"), "taskId": req("string"),
            "userId": req("string"), "markerId": req("string"),
            "submittedAt": req("timestamp"), "congruence": req("map"),
        }, {"task": _RW}),
        desc("interactions", {
            "eventId": req("string"), "kind": req("string"),
            "userId": req("string"), "sessionId": req("string"),
            "at": req("timestamp"), "taskId": opt("string"),
            "markerId": opt("string"),
        }, {"metrics": _RW, "reporting": _R}),
        desc("interactionClaims", {"eventId": req("string")},
             {"metrics": _RW}),
        desc("esmInstruments", {"instrumentId": req("string"), "items": opt("list")},
             {"esm": _RW, "reporting": _R}),
        desc("esmPending", {
            "userId": req("string"), "taskId": req("string"),
            "rewardAmount": req("int"), "completedAt": req("timestamp"),
        }, {"esm": _RW}),
        desc("esmResponses", {
            "responseId": req("string"), "taskId": req("string"),
            "userId": req("string"), "answers": req("map"),
            "submittedAt": req("timestamp"),
        }, {"esm": _RW, "reporting": _R}),
        desc("feedback", {
            "feedbackId": req("string"), "userId": req("string"),
            "text": req("string"), "createdAt": req("timestamp"),
            "status": req("string"),
        }, {"esm": _RW}),
        desc("ledger", {
            "entryId": req("string"), "userId": req("string"),
            "kind": req("string"), "amount": req("int"),
            "refId": req("string"), "at": req("timestamp"),
        }, {"reward": _RW, "reporting": _R}),
        desc("redemptions", {
            "redemptionId": req("string"), "userId": req("string"),
            "credits": req("int"), "coins": req("int"),
            "state": req("string"), "nonce": req("string"),
            "at": req("timestamp"),
        }, {"reward": _RW, "reporting": _R}),
        desc("files", {}, {"task": _RW}),
    ]


def register_schemas(data: DataLayer) -> None:
    for schema in _schemas():
        data.registry.register_schema(schema, requester="platform")


DEFAULT_ESM_ITEMS = [
    {"itemId": "stress", "prompt": "How stressed do you feel right now?", "scale": "likert5"},
    {"itemId": "focus", "prompt": "How focused were you while doing this task?", "scale": "likert5"},
    {"itemId": "enjoyment", "prompt": "How much did you enjoy this task?", "scale": "likert5"},
    {"itemId": "comment", "prompt": "Anything else you want to tell us?", "scale": "freeText"},
]


class Platform:
    """One assembled deployment: data layer, fabric, and service fleet."""

    def __init__(self, config: PlatformConfig | None = None, fabric=None, device=None,
                 data: DataLayer | None = None, replicas: int = 2):
        self.config = config or PlatformConfig()
        self.data = data or DataLayer(
            mode=self.config.data_mode,
            root=self.config.data_dir,
            migration_window_s=self.config.migration_window_s,
        )
        register_schemas(self.data)
        self.fabric = fabric or InProcessFabric()

        self.auth = AuthService(self.data, self.config)
        self.location = LocationService(self.data, self.config)
        self.tasks = TaskService(self.data, self.config)
        self.metrics = MetricsService(self.data, self.config)
        self.esm = EsmService(self.data, self.config)
        self.reward = RewardService(self.data, self.config, device=device)
        self.reporting = ReportingService(self.data, self.config)

        self.supervisor = Supervisor(self.data, self.config)
        self.fabric.register_instance(self.supervisor, mode=self.supervisor.mode)
        limits = {}
        if self.config.fleet_config_path:
            limits = load_fleet_config(self.config.fleet_config_path)
        for service in (self.auth, self.reward):
            self._manage(service, 1, limits)
        for service in (self.location, self.tasks, self.metrics, self.esm, self.reporting):
            self._manage(service, max(1, replicas), limits)
        self.supervisor.start_monitor()

        self._seed()

    def _manage(self, service, desired: int, limits: dict) -> None:
        spec = limits.get(service.name, {})
        self.supervisor.manage(
            service, desired,
            min_count=spec.get("min", 1),
            max_count=spec.get("max", 8),
        )

    def _seed(self) -> None:
        from .services.esm import ACTIVE_POINTER, INSTRUMENTS

        if self.data.docs.get_or_none("esm", INSTRUMENTS, ACTIVE_POINTER) is None:
            self.esm.op_set_instrument({"role": "researcher", "items": DEFAULT_ESM_ITEMS})
        try:
            self.auth.create_account(
                self.config.researcher_email, self.config.researcher_password, "researcher"
            )
        except Exception:
            # already seeded on a previous boot of the same store
            pass

    # thin conveniences over the fabric --------------------------------------
    def request(self, route: str, payload: dict, timeout_ms: int | None = None) -> dict:
        return self.fabric.request(route, payload, timeout_ms=timeout_ms)

    def publish(self, topic: str, payload: dict) -> str:
        return self.fabric.publish(topic, payload)

    def settle(self, timeout: float = 10.0) -> bool:
        return self.fabric.settle(timeout)

    def stop(self) -> None:
        self.supervisor.stop_monitor()
        self.fabric.stop()
