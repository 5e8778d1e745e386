"""Mentored training: small networks learning from a frozen mentor's activations."""

__version__ = "0.1.0"
