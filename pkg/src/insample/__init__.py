"""Structured multiplicative density estimation on restricted supports."""

__version__ = "0.1.0"
