"""Synthetic invariance datasets and robustness metric analysis."""

__version__ = "0.1.0"
