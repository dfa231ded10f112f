"""Continual adaptation engine for repeated reference games."""

__version__ = "0.1.0"
