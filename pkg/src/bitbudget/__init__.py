"""Budgeted mixed-precision quantization with a learned allocation policy."""

__version__ = "0.1.0"
