"""Optimal encoding for control under dense Gauss-Poisson population codes."""

__version__ = "0.1.0"
