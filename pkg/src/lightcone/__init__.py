"""Causal future-frame synthesis with light cones on a Minkowski latent space."""

__version__ = "0.1.0"
