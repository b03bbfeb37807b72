"""Grounded preference-based language-action alignment on a synthetic block-pushing world."""

__version__ = "0.1.0"
