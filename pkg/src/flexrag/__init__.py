"""Flexible context compression for retrieval-augmented generation, desk scale."""

__version__ = "0.1.0"
