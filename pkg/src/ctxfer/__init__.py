"""Contextual policy transfer through a learned mixture over source dynamics."""

__version__ = "0.1.0"
