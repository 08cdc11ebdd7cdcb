"""Exception hierarchy shared by every module.

The CLI maps :class:`NumericError` to exit code 2 and every other
:class:`MllaError` to exit code 1.
"""


class MllaError(Exception):
    """Base class for all package errors."""


class ShapeError(MllaError, ValueError):
    pass


class ConfigError(MllaError, ValueError):
    pass


class ValidationError(MllaError, ValueError):
    pass


class FormatError(MllaError, ValueError):
    """Malformed STF file. ``field`` names the offending part of the file."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericError(MllaError, ArithmeticError):
    pass


class ContractError(MllaError, RuntimeError):
    pass


class UndefinedMetricError(MllaError, ValueError):
    """A metric has no value for the given inputs (e.g. HD95 with an empty set)."""


class GenerationError(MllaError, RuntimeError):
    """Synthetic data could not be generated within the retry budget."""
