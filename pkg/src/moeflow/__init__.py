"""Desk-scale sparse MoE diffusion transformer trained with latent flow matching."""

__version__ = "0.1.0"
