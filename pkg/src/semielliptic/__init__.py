"""Alternating transport/diffusion scheme and weighted Monte Carlo for semi-elliptic diffusions."""

__version__ = "0.1.0"
