"""Exception hierarchy for the fpvt_tensor engine."""


class Warning(Exception):
    """Exception raised for important warnings like a lossy precision setting.

    This exception is not a subclass of Error. It is not considered an error.
    """
    pass


class Error(Exception):
    """Exception that is the base class of all other error exceptions.

    You can use this to catch all engine errors with one single except statement.
    """
    pass


class ShapeError(Error):
    """Exception raised when operand shapes are incompatible with an operation.

    Examples: matmul inner dimension mismatch, kernel larger than the padded
    input, even depthwise kernel, channel mismatch.
    """
    pass


class DataError(Error):
    """Exception raised for problems with the processed values themselves.

    Examples: class index out of range, degenerate batch statistics,
    unsupported dtype.
    """
    pass


class NumericalError(Error):
    """Exception raised when an operation produces NaN or Inf.

    Non-finite values are surfaced at the op that produced them instead of
    being propagated silently.
    """
    pass


class GradientError(Error):
    """Exception raised for misuse of the backward pass or the optimizers.

    Examples: backward on a non-scalar loss, backward on a loss that is not
    on the tape, optimizer step on a parameter without a gradient.
    """
    pass


class GradCheckError(GradientError):
    """Exception raised when an analytic gradient disagrees with finite differences."""

    def __init__(self, name: str, max_rel_error: float, index: tuple, tolerance: float):
        self.name = name
        self.max_rel_error = max_rel_error
        self.index = index
        self.tolerance = tolerance
        super().__init__(
            f"{name}: max relative error {max_rel_error:.3e} at index {index} "
            f"exceeds tolerance {tolerance:.1e}"
        )
