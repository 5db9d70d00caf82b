"""Infer architecture and training attributes of black-box classifiers from their outputs,
with a generator trained to make fingerprints from different data domains indistinguishable."""

from .config import Config
from .errors import DreamkitError, IncompatibilityError, NonFiniteError, ValidationError

__all__ = ["Config", "DreamkitError", "IncompatibilityError", "NonFiniteError", "ValidationError"]
__version__ = "0.1.0"
