"""Exception hierarchy for the fpvt package.

The engine's base classes are re-exported so a single ``except Error``
catches failures from both the model and the tensor engine.
"""

from typing import Optional

from fpvt_tensor.exceptions import (
    DataError,
    Error,
    GradCheckError,
    GradientError,
    NumericalError,
    ShapeError,
    Warning,
)


class ConfigWarning(Warning, UserWarning):
    """Warning issued for legal but suspicious configurations.

    Example: a patch configuration without overlap.
    """
    pass


class InterfaceError(Error):
    """Exception raised for misuse of the command-line or library surface."""
    pass


class ConfigError(Error):
    """Exception raised for invalid configuration values or config file syntax.

    Carries the 1-based line number when the problem comes from a config file.
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PairsFormatError(ConfigError):
    """Exception raised for a malformed verification pairs file."""
    pass


class ProtocolError(Error):
    """Exception raised when the verification protocol cannot be run.

    Example: a training split that contains only one label.
    """
    pass


class CheckpointError(Error):
    """Exception raised when a checkpoint cannot be written, read or applied."""
    pass


class UnknownIdentityError(Error, LookupError):
    """Exception raised when an identity has no group assignment."""
    pass


class TrainingDivergedError(NumericalError):
    """Exception raised when the training loss stops being finite."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        message = f"training diverged at step {step}"
        super().__init__(f"{message}: {detail}" if detail else message)


__all__ = [
    "Warning",
    "Error",
    "ShapeError",
    "DataError",
    "NumericalError",
    "GradientError",
    "GradCheckError",
    "ConfigWarning",
    "InterfaceError",
    "ConfigError",
    "PairsFormatError",
    "ProtocolError",
    "CheckpointError",
    "UnknownIdentityError",
    "TrainingDivergedError",
]
