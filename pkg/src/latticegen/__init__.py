"""Generative modelling by assigning data to a fixed quantile lattice of the latent prior."""

from .errors import (
    CapacityError,
    ConfigError,
    DomainError,
    FormatError,
    LatticeGenError,
    LengthError,
    NumericError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "DomainError",
    "FormatError",
    "LatticeGenError",
    "LengthError",
    "NumericError",
    "ShapeError",
    "__version__",
]
