"""Dense snippet contrastive pretraining and multiscale fusion for skeleton action localization."""

from .errors import (ConfigError, ContractError, DegenerateError, FormatError, ShapeError,
                     SnipclError, TrainingError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateError", "FormatError", "ShapeError",
    "SnipclError", "TrainingError", "__version__",
]
