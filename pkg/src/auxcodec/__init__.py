"""Learned image codec with an auxiliary coarse network, built on a small numpy autograd."""

from .codec import decode_image, encode_image
from .config import CodecConfig
from .model import CodecModel

__version__ = "0.1.0"

__all__ = ["CodecConfig", "CodecModel", "decode_image", "encode_image", "__version__"]
