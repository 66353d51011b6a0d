from .http import Gateway, GatewayRoute, RateLimiter, ROUTES, match_route, status_for
from .push import PushRegistry

__all__ = [
    "Gateway",
    "GatewayRoute",
    "PushRegistry",
    "RateLimiter",
    "ROUTES",
    "match_route",
    "status_for",
]
