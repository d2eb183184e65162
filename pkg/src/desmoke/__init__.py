"""Surgical smoke simulation, removal baselines, quality metrics and a small GAN trainer."""

from desmoke.errors import (
    ArgumentError,
    DegenerateError,
    DesmokeError,
    DivergenceError,
    FormatError,
    ShapeError,
    SizeError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "DegenerateError",
    "DesmokeError",
    "DivergenceError",
    "FormatError",
    "ShapeError",
    "SizeError",
]
