"""Augmented barrier certificates for approximate initial-state opacity."""

__version__ = "0.1.0"
