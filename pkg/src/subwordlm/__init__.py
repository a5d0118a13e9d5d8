"""Subword and neural language modeling toolkit."""

__version__ = "0.1.0"
