"""Semantic-neighborhood-aware training under label noise, on a numpy autodiff engine."""

__version__ = "0.1.0"
