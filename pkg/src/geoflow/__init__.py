"""Geometric function autoencoder with conditional rectified-flow posterior sampling."""

__version__ = "0.1.0"
