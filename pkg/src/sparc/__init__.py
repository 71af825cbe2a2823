"""Black-box multi-label score refinement toolkit."""

__version__ = "0.1.0"
