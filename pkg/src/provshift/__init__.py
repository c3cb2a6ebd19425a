"""Provenance-shift simulation, training, and robustness benchmarking."""

__version__ = "0.1.0"
