"""Image-conditioned trajectory-grid generation with a latent rectified flow."""

__version__ = "0.1.0"
