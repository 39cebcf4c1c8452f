"""Reversible memory-augmented transformer with hierarchical context compression."""

__version__ = "0.1.0"
