"""Stochastic adversarial networks for multi-domain text classification."""

__version__ = "0.1.0"
