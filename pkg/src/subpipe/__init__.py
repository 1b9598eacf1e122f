"""Pipeline-parallel transformer training with lossless subspace boundary compression."""

from .errors import SubpipeError
from .model import ModelDims, init_model
from .subspace import Subspace

__all__ = ["ModelDims", "Subspace", "SubpipeError", "init_model"]
__version__ = "0.1.0"
