"""Thermodynamically consistent activity-coefficient prediction toolkit."""

__version__ = "0.1.0"
