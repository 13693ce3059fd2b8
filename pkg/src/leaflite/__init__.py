"""Lightweight tomato-leaf-disease classification pipeline."""

__version__ = "0.1.0"
