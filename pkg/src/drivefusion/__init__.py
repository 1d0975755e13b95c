"""Multimodal steering-angle and speed prediction on synthetic driving data."""

__version__ = "0.1.0"
