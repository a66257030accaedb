"""Conditional VAE caption generation with structured latent priors."""

__version__ = "0.1.0"
