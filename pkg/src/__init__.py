"""Parsimonious HMM text-line recognizer."""

__version__ = "1.0.0"
