"""Offline-finding tracker simulation and relay-attack toolkit."""

__version__ = "0.1.0"
