"""Desk-scale laboratory for semantic-aware sketch/photo retrieval."""

__version__ = "0.1.0"
