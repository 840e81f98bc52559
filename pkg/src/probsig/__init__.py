"""Probability signatures and embedding structure in small token models."""
__version__ = "0.1.0"
