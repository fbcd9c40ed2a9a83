"""Pluralistic alignment of a small causal LM via SAE steering and entropy-weighted decoding."""

__version__ = "0.1.0"
