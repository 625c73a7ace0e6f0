"""Cross-embodiment active visual tracking laboratory."""

__version__ = "0.1.0"
