"""Unsupervised domain adaptation for binary segmentation via VAE latent search."""

__version__ = "0.1.0"
