"""Learned multi-argument activation functions in plain numpy."""

__version__ = "0.1.0"
