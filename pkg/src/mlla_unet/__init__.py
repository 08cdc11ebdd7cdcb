"""Linear-attention U-Net for 2D medical image segmentation, on a small numpy autodiff engine."""

from .errors import (ConfigError, ContractError, FormatError, GenerationError, MllaError, NumericError, ShapeError,
                     UndefinedMetricError, ValidationError)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "FormatError", "GenerationError", "MllaError", "NumericError", "ShapeError",
    "UndefinedMetricError", "ValidationError", "Tensor", "backward", "no_grad", "__version__",
]
