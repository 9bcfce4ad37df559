"""Constrained multi-objective architecture search for early-exit CNNs."""

__version__ = "0.1.0"
