"""Concept-vector steering on a toy pixel-space diffusion transformer."""
from __future__ import annotations

from .config import RunConfig
from .errors import (
    DegenerateDirectionError,
    NumericError,
    OracleRejected,
    ShapeError,
    SteerlabError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "DegenerateDirectionError", "NumericError", "OracleRejected", "ShapeError",
    "SteerlabError", "ValidationError", "__version__",
]
