"""Location-based crowdsourcing platform: services, message fabric, gateway, tooling."""

__version__ = "1.0.0"
