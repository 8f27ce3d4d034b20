"""Geo-aware FaaS platform: geofenced pub/sub brokers, bridges, executors and clients."""

__version__ = "0.1.0"
