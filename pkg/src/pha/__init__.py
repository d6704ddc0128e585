"""Prototype-conditioned hypernetwork adapters on a tiny frozen seq2seq transformer."""

__version__ = "0.1.0"
