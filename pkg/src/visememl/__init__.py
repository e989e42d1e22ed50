"""Viseme-based metric learning for normal vs. silent visual speech recognition."""

__version__ = "0.1.0"
