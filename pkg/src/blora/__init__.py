"""Bayesian low-rank adapters on a toy encoder-decoder."""

__version__ = "0.1.0"
