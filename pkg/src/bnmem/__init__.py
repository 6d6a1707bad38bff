"""Batch normalization and memorization: engine, theory, attacks."""

__version__ = "0.1.0"
