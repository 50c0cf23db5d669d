"""Context-aware two-stage training toolkit for small speech separators."""

__version__ = "0.1.0"
