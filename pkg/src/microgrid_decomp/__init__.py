"""Decomposition methods for stochastic microgrid management."""
__version__ = "0.1.0"
