"""Doubly-adaptive quantization for federated learning uplinks."""

__version__ = "0.1.0"
