"""Conditional inverse density reweighting and identity-robustness metrics."""

__version__ = "0.1.0"
