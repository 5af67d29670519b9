"""Tests for exception hierarchy."""

from fpvt_tensor.exceptions import (
    DataError,
    Error,
    GradCheckError,
    GradientError,
    NumericalError,
    ShapeError,
    Warning,
)


class TestExceptionHierarchy:
    """Test engine exception hierarchy."""

    def test_exception_inheritance(self):
        """Test exception inheritance structure."""
        assert issubclass(ShapeError, Error)
        assert issubclass(DataError, Error)
        assert issubclass(NumericalError, Error)
        assert issubclass(GradientError, Error)
        assert issubclass(GradCheckError, GradientError)

        # Warning is not an error
        assert not issubclass(Warning, Error)

    def test_exception_creation(self):
        """Test exception creation with messages."""
        error = ShapeError("matmul: inner dimensions differ")
        assert str(error) == "matmul: inner dimensions differ"
        assert isinstance(error, Error)

    def test_gradcheck_error_fields(self):
        """Test GradCheckError carries the failing location."""
        error = GradCheckError("conv2d[weight]", 3.5e-2, (0, 1, 2, 2), 1e-4)

        assert error.name == "conv2d[weight]"
        assert error.max_rel_error == 3.5e-2
        assert error.index == (0, 1, 2, 2)
        assert error.tolerance == 1e-4
        assert "conv2d[weight]" in str(error)
        assert "(0, 1, 2, 2)" in str(error)
        assert isinstance(error, GradientError)
