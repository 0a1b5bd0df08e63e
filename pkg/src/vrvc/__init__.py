"""Variable-rate codec for tri-plane volumetric video."""

from . import config
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["config", "BACKEND", "__version__"]
