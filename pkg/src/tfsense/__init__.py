"""Streaming time-frequency energy detection for wideband I/Q."""

__version__ = "0.1.0"
