"""Predict moral foundations, personal values and demographics from browsing and app usage."""

__version__ = "0.1.0"
