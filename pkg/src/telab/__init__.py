"""Desk-scale WAN traffic-engineering laboratory."""

__version__ = "0.1.0"
