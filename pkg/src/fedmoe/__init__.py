"""Federated averaging simulator with mixture-of-experts personalization."""

__version__ = "0.1.0"
