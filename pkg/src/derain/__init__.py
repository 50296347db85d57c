"""Raindrop removal with a conditional GAN, scored by how many cars a detector recovers."""

from .errors import DerainError

__version__ = "0.1.0"

__all__ = ["DerainError", "__version__"]
