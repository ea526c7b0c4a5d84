"""Multilingual multimodal translation with a from-scratch numpy autodiff core."""

from .config import RunConfig
from .data import Vocab
from .model import M3P, ModelConfig, ablate_vision

__all__ = ["M3P", "ModelConfig", "RunConfig", "Vocab", "ablate_vision"]
__version__ = "0.1.0"
