"""Texture-channel autoencoders for B-mode ultrasound, with training and frozen-encoder evaluation."""

from .errors import UstexError
from .model import TextureAutoencoder, TextureConfig

__version__ = "0.1.0"

__all__ = ["TextureAutoencoder", "TextureConfig", "UstexError", "__version__"]
