"""Lightweight learned satellite image codec with metadata-conditioned diffusion compensation.

Everything runs on numpy: a small reverse-mode autodiff engine drives the
codec networks, the hyperprior entropy model, a DDIM sampler with a toy
U-Net, and the two training stages. The range coder, container formats and
metrics are self-contained as well.
"""

from .codec import Codec, CodecConfig
from .diffusion import DiffusionConfig, DiffusionModel
from .metadata import MetadataRecord
from .pipeline import SatelliteCodec

__all__ = ["Codec", "CodecConfig", "SatelliteCodec", "DiffusionConfig", "DiffusionModel", "MetadataRecord"]
__version__ = "0.1.0"
