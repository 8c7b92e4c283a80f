"""Benchmarking harness for trajectory prediction models."""
__version__ = "0.1.0"
