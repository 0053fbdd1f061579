"""Quantization-aware training toolkit for small autoregressive language models."""

__version__ = "0.1.0"
