"""Platform-wide configuration with environment overrides.

Every tunable the services read lives here, so tests can shrink timeouts
and the deployment can harden secrets without touching service code.
"""

from __future__ import annotations

import os
import secrets
from dataclasses import dataclass, field


def _auth_secret() -> str:
    # AUTH_SECRET must be set in production so tokens survive process
    # restarts; an ephemeral per-process secret keeps dev and tests working.
    return os.environ.get("AUTH_SECRET") or secrets.token_hex(32)


@dataclass
class PlatformConfig:
    # credits and redemption
    coin_price: int = 5
    redemption_timeout_s: float = 10.0
    device_ack_timeout_s: float = 2.0

    # location congruence
    congruence_radius_m: float = 75.0
    fix_staleness_s: float = 120.0
    fix_future_skew_s: float = 60.0

    # authentication
    auth_secret: str = field(default_factory=_auth_secret)
    token_ttl_ms: int = 24 * 3600 * 1000
    min_password_len: int = 8
    scrypt_n: int = 2**14
    researcher_email: str = "research.lead@example.org"
    researcher_password: str = "set-a-real-password"

    # gateway
    rate_limit_max: int = 30
    rate_limit_window_s: float = 10.0
    push_buffer_size: int = 100
    push_offline_window_s: float = 600.0

    # data layer
    data_mode: str = "memory"
    data_dir: str | None = None
    migration_window_s: float = 0.2

    # fleet supervision
    heartbeat_interval_s: float = 1.0
    heartbeat_misses: int = 3
    restart_budget: int = 5
    restart_window_s: float = 60.0
    fleet_config_path: str | None = None

    @classmethod
    def for_tests(cls, **overrides) -> "PlatformConfig":
        """Fast settings for test runs; semantics unchanged."""
        values = {
            "scrypt_n": 2**11,
            "redemption_timeout_s": 0.5,
            "device_ack_timeout_s": 0.5,
            "migration_window_s": 0.15,
            "heartbeat_interval_s": 0.05,
        }
        values.update(overrides)
        return cls(**values)
