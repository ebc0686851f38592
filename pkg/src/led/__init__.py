"""Conditional diffusion enhancement of degraded fundus-like images."""

__version__ = "0.1.0"
