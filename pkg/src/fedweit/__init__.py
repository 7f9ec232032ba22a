"""Federated continual learning with decomposed per-client parameters."""

__version__ = "0.1.0"
