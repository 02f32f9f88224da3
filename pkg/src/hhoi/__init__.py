"""Compositional human-human-object interaction generation with score-based diffusion."""

__version__ = "0.1.0"
