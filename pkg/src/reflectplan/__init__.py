"""Reflective test-time planning on a seedable supply-network simulator."""

__version__ = "0.1.0"
