"""Recursive evidence chains for matrix completion."""

__version__ = "0.1.0"
