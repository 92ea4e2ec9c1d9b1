"""Generalization-gap prediction from per-layer margin signatures."""

__version__ = "0.1.0"
