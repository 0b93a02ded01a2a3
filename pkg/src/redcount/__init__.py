"""Fully convolutional redundant counting."""

__version__ = "0.1.0"
