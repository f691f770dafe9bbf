"""Compressed-domain image classification on learned-codec latents."""

__version__ = "0.1.0"
