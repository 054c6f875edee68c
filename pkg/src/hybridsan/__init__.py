"""Transformer ASR encoder mixing lower self-attention layers with upper feed-forward layers."""

__version__ = "0.1.0"
