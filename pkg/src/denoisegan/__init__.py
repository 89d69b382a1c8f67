"""Denoising conditional GAN for semantic-layout to image synthesis."""

from .tensor import Tensor, backward, no_grad
from .rng import Rng

__version__ = "0.1.0"

__all__ = ["Rng", "Tensor", "backward", "no_grad", "__version__"]
