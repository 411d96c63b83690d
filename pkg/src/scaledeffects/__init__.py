"""Doubly robust estimation and testing of scaled treatment effects on multiple outcomes."""

__version__ = "0.1.0"
