"""Stackelberg-Nash hierarchical control of the linearised Oldroyd fluid."""

__version__ = "0.1.0"
