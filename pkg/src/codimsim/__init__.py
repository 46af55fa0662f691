"""Codimensional rod/shell simulation with filtered contact barriers."""

__version__ = "0.1.0"
