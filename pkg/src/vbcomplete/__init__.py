"""Variational Bayesian CP tensor completion with subspace side information."""

__version__ = "0.1.0"
