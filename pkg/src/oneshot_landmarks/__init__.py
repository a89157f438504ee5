"""One-shot landmark detection with single-landmark training and per-landmark adapters."""

__version__ = "0.1.0"
