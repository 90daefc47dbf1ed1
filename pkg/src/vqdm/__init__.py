"""Additive multi-codebook weight quantization for a miniature diffusion model."""

__version__ = "0.1.0"
