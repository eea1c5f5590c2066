"""Latent diffusion reconstruction of point clouds from intercepted codec latents."""

__version__ = "0.1.0"
