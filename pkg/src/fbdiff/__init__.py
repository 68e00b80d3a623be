"""Numerical laboratory for 1-D forward-backward diffusion problems."""

__version__ = "0.1.0"
