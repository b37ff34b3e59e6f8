"""Transactions over simulated disaggregated memory with compute-side locks."""

__version__ = "0.1.0"
