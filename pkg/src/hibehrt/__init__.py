"""Hierarchical transformer for long electronic health records."""

__version__ = "0.1.0"
