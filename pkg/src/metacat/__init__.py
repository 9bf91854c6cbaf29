"""Adaptive testing engine with a meta-learned question selection policy."""

__version__ = "0.1.0"
