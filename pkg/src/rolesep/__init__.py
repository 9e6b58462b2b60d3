"""Role-separated transformer for ARC-style grid reasoning."""

__version__ = "0.1.0"
