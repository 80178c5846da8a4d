"""Proxy-geometry panoramic scene builder."""

__version__ = "0.1.0"
