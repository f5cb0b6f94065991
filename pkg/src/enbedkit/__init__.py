"""Byte-level encoder-decoder transformer toolkit for nucleotide sequences."""

__version__ = "0.1.0"
