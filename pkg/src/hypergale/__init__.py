"""Hypergraph gated-attention classifier for functional-connectivity matrices."""

__version__ = "0.1.0"
