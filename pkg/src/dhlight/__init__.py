"""Directed-hypergraph multi-agent traffic signal control laboratory."""

__version__ = "0.1.0"
