"""Infinite PEPS real- and imaginary-time evolution with SVDU, NTU and FTU bond truncation."""

__version__ = "0.1.0"
