"""Recursive Gaussian-process parameter fields jointly estimated with a battery circuit model."""

__version__ = "0.1.0"
