"""Conversational semantic parsing over knowledge graphs."""

__version__ = "0.1.0"
