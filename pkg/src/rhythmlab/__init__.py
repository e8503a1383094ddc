"""Desk-scale lyrics-conditioned latent flow matching on synthetic songs."""

__version__ = "0.1.0"
