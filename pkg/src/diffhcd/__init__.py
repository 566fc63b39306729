"""Diffusion-based image-to-image translation and targetless change detection."""

__version__ = "0.1.0"
