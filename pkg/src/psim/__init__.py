"""Finite volume charge transport for three-layer perovskite devices."""

__version__ = "0.1.0"
