"""Graph-based approximate gradient codes with optimal decoding."""

__version__ = "0.1.0"
