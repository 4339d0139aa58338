"""Orthogonal moment construction, estimation and diagnostics."""

__version__ = "0.1.0"
