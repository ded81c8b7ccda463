"""Desk-scale scene-text detector with pyramid context supervision."""

__version__ = "0.1.0"
