"""Robust output-feedback synthesis and constraint inference from closed-loop demonstrations."""

__version__ = "0.1.0"
