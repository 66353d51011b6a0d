from .envelope import Envelope
from .routing import RoutingTable
from .broker import Broker
from .base import Fabric, FabricStats, ServiceInstance
from .inprocess import InProcessFabric
from .network import BrokerDaemon, NetworkFabric

__all__ = [
    "Broker",
    "BrokerDaemon",
    "Envelope",
    "Fabric",
    "FabricStats",
    "InProcessFabric",
    "NetworkFabric",
    "RoutingTable",
    "ServiceInstance",
]
