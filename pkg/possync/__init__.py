"""Cascaded DoA/ToA tracking and joint positioning/synchronization for ultra-dense networks."""

__version__ = "0.3.0"
