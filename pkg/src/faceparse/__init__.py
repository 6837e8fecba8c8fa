"""Interlinked CNN face parsing in plain numpy."""
from .errors import (
    ConfigError,
    DataError,
    FaceParseError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
)
from .icnn import ICNN, ICNNConfig, ICNNParams, init_params

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "FaceParseError", "FormatError", "NumericError",
    "ShapeError", "StateError", "ICNN", "ICNNConfig", "ICNNParams", "init_params",
]
