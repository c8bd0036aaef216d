"""Command-line tools: dataset I/O, coil compression, metrics and the entry point."""

from .main import main

__all__ = ["main"]
