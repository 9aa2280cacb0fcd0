"""Desk-scale audio-visual segmentation with dynamic derivation and
elimination of audio semantics."""

from .config import RunConfig
from .errors import ContractError, DataFormatError, GradCheckError

__all__ = ["RunConfig", "ContractError", "DataFormatError", "GradCheckError"]
__version__ = "0.1.0"
