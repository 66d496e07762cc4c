"""Converting a dense decoder into a mixture of experts and extending it to a new token modality."""

from .config import RunConfig, preset
from .model import Decoder, decoder_forward, generate

__all__ = ["Decoder", "RunConfig", "decoder_forward", "generate", "preset"]
__version__ = "0.1.0"
