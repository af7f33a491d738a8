"""Jointly optimized query encoder and product-quantization index for dense retrieval."""

__version__ = "0.1.0"
