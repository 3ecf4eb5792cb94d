"""Interpretable dynamic mortality-risk prediction for longitudinal records."""

__version__ = "0.1.0"
