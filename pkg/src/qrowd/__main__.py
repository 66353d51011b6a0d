"""Process entry points: `python -m qrowd serve` boots a full deployment.

The platform is a single process in both fabric modes; "network" keeps the
service instances local but moves every request and event over real sockets,
which is the configuration used to shake out serialization bugs.
"""

from __future__ import annotations

import signal
import threading

import click

from .config import PlatformConfig
from .devices.dispenser import DispenserClient, StubDispenser
from .fabric import InProcessFabric, NetworkFabric
from .gateway.http import Gateway
from .platform import Platform


@click.group()
def main():
    """Run platform processes."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@click.option("--data-dir", default=None,
              help="Persist the data layer here; omit for in-memory.")
@click.option("--fleet-config", default=None,
              help="JSON file with per-service replica limits.")
@click.option("--replicas", default=2, show_default=True,
              help="Initial replica count for the stateless services.")
@click.option("--fabric", "fabric_kind", type=click.Choice(["inprocess", "network"]),
              default="inprocess", show_default=True)
@click.option("--dispenser-port", default=None, type=int,
              help="Connect to a coin dispenser at 127.0.0.1:PORT.")
@click.option("--with-dispenser", is_flag=True,
              help="Start a built-in stub dispenser and connect to it.")
def serve(host, port, data_dir, fleet_config, replicas, fabric_kind,
          dispenser_port, with_dispenser):
    """Boot the service fleet and the public gateway."""
    config = PlatformConfig(
        data_mode="disk" if data_dir else "memory",
        data_dir=data_dir,
        fleet_config_path=fleet_config,
    )

    stub = None
    if with_dispenser:
        stub = StubDispenser().start()
        dispenser_port = stub.port
        click.echo(f"stub dispenser on 127.0.0.1:{dispenser_port}")
    device = None
    if dispenser_port is not None:
        device = DispenserClient(
            "127.0.0.1", dispenser_port,
            ack_timeout_s=config.device_ack_timeout_s,
            done_timeout_s=config.redemption_timeout_s,
        )

    fabric = NetworkFabric() if fabric_kind == "network" else InProcessFabric()
    platform = Platform(config, fabric=fabric, device=device, replicas=replicas)
    gateway = Gateway(platform.fabric, config, host=host, port=port)
    click.echo(f"gateway listening on {gateway.url}")
    click.echo(f"researcher login: {config.researcher_email}")

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        gateway.stop()
        platform.stop()
        if stub is not None:
            stub.stop()
    click.echo("stopped")


@main.command()
@click.option("--behavior", type=click.Choice(["ok", "err", "stall"]),
              default="ok", show_default=True)
def dispenser(behavior):
    """Run a standalone stub coin dispenser."""
    stub = StubDispenser(behavior=behavior).start()
    click.echo(f"dispenser listening on 127.0.0.1:{stub.port}")
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        stub.stop()


if __name__ == "__main__":
    main()
