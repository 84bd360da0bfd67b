"""Sparse ToF depth completion with quantization-aware training."""

__version__ = "0.1.0"
