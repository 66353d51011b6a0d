"""Supervisor tests: scaling with drain, heartbeat death, crash recovery,
and rolling redeploys measured under synthetic request load."""

import json
import threading
import time
from collections import Counter

import pytest

from qrowd.config import PlatformConfig
from qrowd.errors import QrowdError
from qrowd.fabric import InProcessFabric
from qrowd.platform import Platform
from qrowd.services.base import Service
from qrowd.supervisor import Supervisor, load_fleet_config

ADMIN = {"role": "researcher"}


class PingService(Service):
    name = "ping"
    mode = "replicated"

    def __init__(self):
        super().__init__(None, None)

    def operations(self):
        return {"ping": lambda payload: {"pong": True}}


class NeverReadyService(PingService):
    def op_health(self, payload):
        raise QrowdError("NotReady", "refusing the readiness probe")


def make_supervisor(ping=None, **config_overrides):
    config = PlatformConfig.for_tests(**config_overrides)
    fabric = InProcessFabric()
    sup = Supervisor(None, config, drain_timeout_s=5.0, ready_timeout_s=1.0)
    fabric.register_instance(sup, mode="singleton")
    if ping is not None:
        sup.manage(ping, desired=2, max_count=4)
        sup.start_monitor()
    return sup, fabric


@pytest.fixture
def fleet():
    sup, fabric = make_supervisor(PingService())
    yield sup, fabric
    sup.stop_monitor()
    fabric.stop()


def record_states(sup, service):
    entry = sup.op_status({"service": service})["fleet"][0]
    return [r["state"] for r in entry["instances"]]


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


class LoadHarness:
    """Fires requests at a fixed rate and tallies outcomes by error code."""

    def __init__(self, fabric, route, rate_per_s, payload=None):
        self.fabric = fabric
        self.route = route
        self.interval = 1.0 / rate_per_s
        self.payload = payload or {}
        self.outcomes = Counter()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=10.0)

    def _run(self):
        next_shot = time.monotonic()
        while not self._stop.is_set():
            try:
                self.fabric.request(self.route, dict(self.payload), timeout_ms=2000)
                self.outcomes["ok"] += 1
            except QrowdError as err:
                self.outcomes[err.code] += 1
            next_shot += self.interval
            delay = next_shot - time.monotonic()
            if delay > 0:
                time.sleep(delay)

    @property
    def total(self):
        return sum(self.outcomes.values())

    @property
    def failed(self):
        return self.total - self.outcomes["ok"]


class TestFleetAssembly:
    def test_boot_spawns_desired_healthy(self, fleet):
        sup, fabric = fleet
        assert record_states(sup, "ping") == ["healthy", "healthy"]
        assert len(fabric.routing.endpoints("ping", healthy_only=True)) == 2
        assert fabric.request("ping.ping", {})["pong"] is True

    def test_unready_service_fails_boot(self):
        sup, fabric = make_supervisor()
        try:
            with pytest.raises(QrowdError) as err:
                sup.manage(NeverReadyService(), desired=1)
            assert err.value.code == "SpawnFailed"
            assert fabric.routing.endpoints("ping", healthy_only=True) == []
        finally:
            fabric.stop()

    def test_status_carries_limits_and_plan(self, fleet):
        sup, _ = fleet
        doc = sup.op_status({})
        entry = doc["fleet"][0]
        assert (entry["min"], entry["max"]) == (1, 4)
        assert doc["plan"] == {"ping": 2}
        assert entry["degraded"] is False

    def test_status_unknown_service(self, fleet):
        sup, _ = fleet
        with pytest.raises(QrowdError) as err:
            sup.op_status({"service": "nope"})
        assert err.value.code == "UnknownService"


class TestScale:
    def test_scale_up_converges(self, fleet):
        sup, fabric = fleet
        plan = sup.op_scale({**ADMIN, "service": "ping", "replicas": 4})
        assert plan["plan"]["ping"] == 4
        assert record_states(sup, "ping") == ["healthy"] * 4
        assert len(fabric.routing.endpoints("ping", healthy_only=True)) == 4

    def test_scale_down_drains_then_stops(self, fleet):
        sup, fabric = fleet
        sup.op_scale({**ADMIN, "service": "ping", "replicas": 4})
        sup.op_scale({**ADMIN, "service": "ping", "replicas": 1})
        states = record_states(sup, "ping")
        assert states.count("healthy") == 1
        assert states.count("stopped") == 3
        assert len(fabric.routing.endpoints("ping")) == 1

    def test_scale_beyond_cap(self, fleet):
        sup, _ = fleet
        with pytest.raises(QrowdError) as err:
            sup.op_scale({**ADMIN, "service": "ping", "replicas": 5})
        assert err.value.code == "CapExceeded"

    def test_scale_below_min(self, fleet):
        sup, _ = fleet
        with pytest.raises(QrowdError) as err:
            sup.op_scale({**ADMIN, "service": "ping", "replicas": 0})
        assert err.value.code == "CapExceeded"

    def test_scale_requires_researcher(self, fleet):
        sup, _ = fleet
        with pytest.raises(QrowdError) as err:
            sup.op_scale({"role": "participant", "service": "ping", "replicas": 3})
        assert err.value.code == "AccessDenied"

    def test_singleton_capped_at_one(self):
        class Lone(PingService):
            name = "lone"
            mode = "singleton"

        sup, fabric = make_supervisor()
        try:
            sup.manage(Lone(), desired=1, max_count=8)
            with pytest.raises(QrowdError) as err:
                sup.op_scale({**ADMIN, "service": "lone", "replicas": 2})
            assert err.value.code == "CapExceeded"
        finally:
            fabric.stop()

    def test_drained_endpoint_never_dispatched_after_cut(self, fleet):
        sup, fabric = fleet
        sup.op_scale({**ADMIN, "service": "ping", "replicas": 3})
        with LoadHarness(fabric, "ping.ping", rate_per_s=200):
            time.sleep(0.3)
            victims = set(fabric.routing.endpoints("ping"))
            sup.op_scale({**ADMIN, "service": "ping", "replicas": 1})
            survivors = set(fabric.routing.endpoints("ping"))
            cut = len(fabric.stats.dispatch_trace)
            time.sleep(0.3)
            tail = list(fabric.stats.dispatch_trace)[cut:]
        drained = victims - survivors
        assert len(drained) == 2
        assert all(endpoint not in drained for _, endpoint in tail)

    def test_scale_down_loses_no_requests(self, fleet):
        sup, fabric = fleet
        sup.op_scale({**ADMIN, "service": "ping", "replicas": 4})
        with LoadHarness(fabric, "ping.ping", rate_per_s=200) as load:
            time.sleep(0.2)
            sup.op_scale({**ADMIN, "service": "ping", "replicas": 1})
            time.sleep(0.2)
        assert load.failed == 0
        assert fabric.stats.no_healthy_errors == 0


class TestCrashRecovery:
    def test_killed_instance_goes_dead_and_is_replaced(self, fleet):
        sup, fabric = fleet
        victim = sup._records["ping"][0]
        victim.instance.kill()
        assert wait_for(lambda: victim.state == "dead", timeout=3.0)
        assert victim.endpoint not in fabric.routing.endpoints("ping")
        assert wait_for(lambda: record_states(sup, "ping").count("healthy") == 2)
        entry = sup.op_status({"service": "ping"})["fleet"][0]
        assert entry["degraded"] is False

    def test_dead_within_three_missed_heartbeats(self, fleet):
        sup, fabric = fleet
        interval = sup.config.heartbeat_interval_s
        victim = sup._records["ping"][0]
        killed_at = time.monotonic()
        victim.instance.kill()
        assert wait_for(lambda: victim.state == "dead", timeout=3.0)
        # budget: one tick to notice plus three missed beats, with slack
        assert time.monotonic() - killed_at <= interval * 6

    def test_restart_budget_exhaustion_marks_degraded(self):
        sup, fabric = make_supervisor(PingService(), restart_budget=2)
        try:
            for _ in range(3):
                victim = next(r for r in sup._records["ping"] if r.state == "healthy")
                victim.instance.kill()
                assert wait_for(lambda: victim.state == "dead", timeout=3.0)
                wait_for(lambda: record_states(sup, "ping").count("healthy") == 2,
                         timeout=1.0)
            assert wait_for(
                lambda: sup.op_status({"service": "ping"})["fleet"][0]["degraded"],
                timeout=3.0)
            assert record_states(sup, "ping").count("healthy") < 2
        finally:
            sup.stop_monitor()
            fabric.stop()

    def test_scale_clears_degraded(self):
        sup, fabric = make_supervisor(PingService(), restart_budget=1)
        try:
            for _ in range(2):
                victim = next(r for r in sup._records["ping"] if r.state == "healthy")
                victim.instance.kill()
                assert wait_for(lambda: victim.state == "dead", timeout=3.0)
                time.sleep(0.2)
            assert sup.op_status({"service": "ping"})["fleet"][0]["degraded"]
            sup.op_scale({**ADMIN, "service": "ping", "replicas": 2})
            entry = sup.op_status({"service": "ping"})["fleet"][0]
            assert entry["degraded"] is False
            assert record_states(sup, "ping").count("healthy") == 2
        finally:
            sup.stop_monitor()
            fabric.stop()


class TestRollingRedeploy:
    def test_redeploy_replaces_all_and_bumps_version(self, fleet):
        sup, fabric = fleet
        report = sup.op_redeploy({**ADMIN, "service": "ping"})
        assert report["replaced"] == 2
        assert report["version"] == "v2"
        entry = sup.op_status({"service": "ping"})["fleet"][0]
        live = [r for r in entry["instances"] if r["state"] == "healthy"]
        assert [r["version"] for r in live] == ["v2", "v2"]
        assert len(fabric.routing.endpoints("ping", healthy_only=True)) == 2

    def test_redeploy_explicit_version(self, fleet):
        sup, _ = fleet
        report = sup.op_redeploy({**ADMIN, "service": "ping", "version": "v7"})
        assert report["version"] == "v7"
        assert sup.op_redeploy({**ADMIN, "service": "ping"})["version"] == "v8"

    def test_unhealthy_new_version_rolls_back(self, fleet):
        sup, fabric = fleet
        before = set(fabric.routing.endpoints("ping", healthy_only=True))
        sup._managed["ping"] = NeverReadyService()
        with pytest.raises(QrowdError) as err:
            sup.op_redeploy({**ADMIN, "service": "ping"})
        assert err.value.code == "NewVersionUnhealthy"
        assert set(fabric.routing.endpoints("ping", healthy_only=True)) == before
        assert record_states(sup, "ping").count("healthy") == 2

    def test_single_instance_redeploy_overlaps(self, fleet):
        sup, fabric = fleet
        sup.op_scale({**ADMIN, "service": "ping", "replicas": 1})
        with LoadHarness(fabric, "ping.ping", rate_per_s=100) as load:
            time.sleep(0.1)
            sup.op_redeploy({**ADMIN, "service": "ping"})
            time.sleep(0.1)
        assert load.outcomes["NoHealthyInstance"] == 0
        assert load.failed == 0

    def test_redeploy_under_load_close_to_zero_downtime(self, fleet):
        sup, fabric = fleet
        with LoadHarness(fabric, "ping.ping", rate_per_s=50) as load:
            time.sleep(0.3)
            report = sup.op_redeploy({**ADMIN, "service": "ping"})
            time.sleep(0.3)
        assert load.total > 0
        assert load.failed / load.total < 0.01
        assert load.outcomes["NoHealthyInstance"] == 0
        assert report["failedRequests"] == 0
        assert report["durationMs"] < 120_000


class TestFleetConfig:
    def test_load_and_apply_limits(self, tmp_path):
        path = tmp_path / "fleet.json"
        path.write_text(json.dumps({
            "services": {
                "ping": {"min": 1, "max": 2, "command": ["qrowd", "serve"],
                         "env": {"QROWD_URL": "http://127.0.0.1:8080"}},
            }
        }))
        limits = load_fleet_config(str(path))
        assert limits["ping"]["max"] == 2
        sup, fabric = make_supervisor()
        try:
            sup.manage(PingService(), desired=2, **{
                "min_count": limits["ping"]["min"], "max_count": limits["ping"]["max"]})
            with pytest.raises(QrowdError) as err:
                sup.op_scale({**ADMIN, "service": "ping", "replicas": 3})
            assert err.value.code == "CapExceeded"
        finally:
            fabric.stop()

    @pytest.mark.parametrize("doc", [
        {},
        {"services": []},
        {"services": {"ping": {"min": -1}}},
        {"services": {"ping": {"min": 3, "max": 1}}},
        {"services": {"ping": {"command": "qrowd serve"}}},
        {"services": {"ping": {"env": {"A": 1}}}},
    ])
    def test_malformed_config_rejected(self, tmp_path, doc):
        path = tmp_path / "fleet.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(QrowdError) as err:
            load_fleet_config(str(path))
        assert err.value.code == "MalformedFleetConfig"


class TestPlatformIntegration:
    def test_platform_fleet_is_supervised(self):
        plat = Platform(PlatformConfig.for_tests())
        try:
            status = plat.request("supervisor.status", ADMIN)
            by_name = {e["service"]: e for e in status["fleet"]}
            assert by_name["task"]["desired"] == 2
            assert by_name["auth"]["mode"] == "singleton"
            assert all(
                r["state"] == "healthy"
                for e in status["fleet"] for r in e["instances"]
            )
        finally:
            plat.stop()

    def test_killed_platform_instance_recovers_transparently(self):
        plat = Platform(PlatformConfig.for_tests())
        try:
            victim = plat.supervisor._records["task"][0]
            victim.instance.kill()
            assert wait_for(lambda: victim.state == "dead", timeout=3.0)
            assert wait_for(
                lambda: len(plat.fabric.routing.endpoints("task", healthy_only=True)) == 2,
                timeout=3.0)
            admin = {"role": "researcher"}
            reply = plat.request("task.list_tasks", admin)
            assert reply["tasks"] == []
        finally:
            plat.stop()

    def test_request_rate_signal_appears(self):
        plat = Platform(PlatformConfig.for_tests())
        try:
            # spread requests across monitor ticks so the deltas are visible
            for _ in range(8):
                for _ in range(5):
                    plat.request("task.health", {})
                time.sleep(plat.config.heartbeat_interval_s)
            entry = plat.request("supervisor.status",
                                 {**ADMIN, "service": "task"})["fleet"][0]
            assert entry["requestsPerSecond"] > 0
        finally:
            plat.stop()
