"""Emotion-cause transition graphs for empathetic dialogue generation."""

__version__ = "0.1.0"
