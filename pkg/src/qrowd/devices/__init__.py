"""Hardware-facing adapters (coin dispenser protocol client and test stub)."""

from .dispenser import DeviceUnreachable, DispenserClient, StubDispenser

__all__ = ["DeviceUnreachable", "DispenserClient", "StubDispenser"]
