"""Conditional Monge maps learned as gradients of partially input convex networks."""

__version__ = "0.1.0"

from .errors import CondOTError  # noqa: E402,F401
