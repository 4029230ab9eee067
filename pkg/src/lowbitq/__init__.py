"""Extremely low-bit weight quantization lab."""

__version__ = "0.1.0"
