"""Private optimization with projected Langevin diffusion."""

__version__ = "0.1.0"
