"""Gradient-free training of dense networks by bundled two-extreme-point coordinate search."""

__version__ = "0.1.0"
