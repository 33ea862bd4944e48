"""Hybrid imitative planning on a synthetic off-road world."""

__version__ = "0.1.0"
