"""Discourse-aware emotion cause extraction in conversations."""

__version__ = "0.1.0"
