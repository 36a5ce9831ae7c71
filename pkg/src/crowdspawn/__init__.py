"""Spawn-dynamics learning and crowd orchestration."""

__version__ = "0.1.0"
