"""Deterministic time-trial racing stack and desk-scale vehicle simulator."""

__version__ = "0.1.0"
