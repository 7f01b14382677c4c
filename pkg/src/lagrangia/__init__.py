"""Sparse identification of Lagrangians from trajectory data."""

__version__ = "0.1.0"
