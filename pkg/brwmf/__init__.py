"""Branching random walk multifractal toolkit."""

__version__ = "0.3.0"
