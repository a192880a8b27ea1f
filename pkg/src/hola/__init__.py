"""Hypergraphic open-ended learning for zero-shot multi-drone cooperative pursuit."""

__version__ = "0.1.0"
