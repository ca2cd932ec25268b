"""Single-step latent-diffusion depth completion with a late-fusion conditional decoder."""

__version__ = "0.1.0"
