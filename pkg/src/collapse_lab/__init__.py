"""Numerical lab for collapse models driven by complex, coloured metric noise."""

__version__ = "0.1.0"
