"""Hierarchical cross-document coreference over scientific concept mentions."""

__version__ = "0.1.0"
