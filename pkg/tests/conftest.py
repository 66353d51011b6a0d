"""Shared fixtures: schema-registered data layers and an assembled platform."""

import re

import pytest

from qrowd.config import PlatformConfig
from qrowd.datalayer import DataLayer, identity_hook
from qrowd.platform import Platform, register_schemas


class RecordingFabric:
    """Publish sink for direct service unit tests, no delivery involved."""

    def __init__(self):
        self.published = []

    def publish(self, topic, payload, sender="client"):
        self.published.append((topic, payload))
        return "msg"

    def topics(self):
        return [t for t, _ in self.published]

    def payloads(self, topic):
        return [p for t, p in self.published if t == topic]


@pytest.fixture
def config():
    return PlatformConfig.for_tests()


@pytest.fixture
def data(config):
    layer = DataLayer(
        "memory",
        compression_hook=identity_hook,
        migration_window_s=config.migration_window_s,
    )
    register_schemas(layer)
    return layer


@pytest.fixture
def sink():
    return RecordingFabric()


@pytest.fixture
def platform(config):
    layer = DataLayer(
        "memory",
        compression_hook=identity_hook,
        migration_window_s=config.migration_window_s,
    )
    plat = Platform(config=config, data=layer)
    yield plat
    plat.stop()


ACCEPTANCE_CRITERIA = {
    1: "full workflow oracle",
    2: "credit conservation under interleaving",
    3: "ESM gating of awards",
    4: "congruence geometry vs oracle",
    5: "rolling redeploy under load",
    6: "round-robin fairness",
    7: "data-layer contract",
    8: "metrics determinism",
    9: "transport equivalence",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion that ran."""
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            match = re.search(r"test_criterion_(\d+)", getattr(report, "nodeid", ""))
            if not match:
                continue
            number = int(match.group(1))
            if status == "passed":
                outcomes.setdefault(number, True)
            else:
                outcomes[number] = False
    if not outcomes:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for number in sorted(outcomes):
        word = "PASS" if outcomes[number] else "FAIL"
        label = ACCEPTANCE_CRITERIA.get(number, "")
        terminalreporter.write_line(f"  criterion {number}: {word} - {label}")
