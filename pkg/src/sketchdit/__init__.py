"""Sketch-conditioned video generation and editing on a toy diffusion transformer."""

__version__ = "0.1.0"
