"""Plugins runnable as subprocess models."""
