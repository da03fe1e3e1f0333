"""Variational prototyping-encoder: prototype-decoding VAE for one-shot symbol recognition."""

__version__ = "0.1.0"
