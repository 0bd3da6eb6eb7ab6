"""Fourier-domain complex self-attention with logmax normalization."""

__version__ = "0.1.0"
