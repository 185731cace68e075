"""Generalized zero-shot learning with visual side information."""

__version__ = "0.1.0"
