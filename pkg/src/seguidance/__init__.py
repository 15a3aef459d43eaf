"""Training-free subject-enhanced attention guidance on a desk-scale latent diffusion model."""

__version__ = "0.1.0"
