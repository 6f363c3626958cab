"""Nested federated learning with width- and depth-scaled residual submodels."""

from .errors import (
    ConfigError,
    ContractError,
    DegenerateBatchError,
    DimensionError,
    DivergenceError,
    FormatError,
    NestFedError,
    SpecError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateBatchError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "NestFedError",
    "SpecError",
]
