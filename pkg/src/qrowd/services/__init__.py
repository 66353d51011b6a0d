"""Domain services: each one owns its collections and a set of fabric routes."""

from .auth import AuthService
from .esm import EsmService
from .location import LocationService
from .metrics import MetricsService
from .reporting import ReportingService
from .rewards import RewardService
from .tasks import TaskService

__all__ = [
    "AuthService",
    "EsmService",
    "LocationService",
    "MetricsService",
    "ReportingService",
    "RewardService",
    "TaskService",
]
