"""Trace-driven emulator of an introspection processing unit."""
from __future__ import annotations

__version__ = "0.1.0"
