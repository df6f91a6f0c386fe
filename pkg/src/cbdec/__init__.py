"""Pointer-generator summarizer with an auxiliary closed-book decoder."""

__version__ = "0.1.0"
