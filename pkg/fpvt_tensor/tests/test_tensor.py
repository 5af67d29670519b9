"""Tests for tensors, the tape and backward."""

import numpy as np
import pytest

from fpvt_tensor import (
    Tape,
    Tensor,
    backward,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)
from fpvt_tensor.exceptions import DataError, GradientError, NumericalError, ShapeError


class TestTensorBasics:
    """Test tensor construction and invariants."""

    def test_default_dtype_is_float32(self):
        """Test new tensors use 32-bit floats by default."""
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_default_dtype_context(self):
        """Test switching to float64 temporarily."""
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_unsupported_dtype_rejected(self):
        """Test only float32 and float64 are allowed."""
        with pytest.raises(DataError, match="Unsupported tensor dtype"):
            set_default_dtype(np.int32)

    def test_non_finite_construction_rejected(self):
        """Test NaN and Inf are surfaced at construction."""
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])
        with pytest.raises(NumericalError):
            Tensor([np.inf])

    def test_shape_and_size(self):
        """Test shape/size agree with the data."""
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        assert t.ndim == 3

    def test_item_requires_single_element(self):
        """Test item() on a multi-element tensor."""
        assert Tensor([[5.0]]).item() == 5.0
        with pytest.raises(DataError):
            Tensor([1.0, 2.0]).item()

    def test_reshape_mismatch(self):
        """Test reshape into an incompatible shape."""
        with pytest.raises(ShapeError, match="cannot reshape"):
            Tensor(np.zeros(6)).reshape(4, 2)

    def test_op_producing_inf_rejected(self):
        """Test ops report the op name when producing non-finite values."""
        with pytest.raises(NumericalError, match="log produced non-finite"):
            Tensor([0.0]).log()

    def test_detach_drops_grad_tracking(self):
        """Test detach returns an off-tape copy."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        d = (w * 2.0).detach()
        assert not d.requires_grad
        np.testing.assert_array_equal(d.data, [2.0, 4.0])


class TestBackward:
    """Test reverse-mode differentiation."""

    def test_sum_gradient_is_ones(self, tape):
        """Test loss = sum(w) gives grad ones."""
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(w.sum())
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_square_gradient(self, tape):
        """Test loss = sum(w*w) gives grad 2w."""
        w = Tensor([[1.0, 2.0]], requires_grad=True)
        (w * w).sum().backward()
        np.testing.assert_allclose(w.grad, [[2.0, 4.0]])

    def test_gradient_accumulates_over_uses(self, tape):
        """Test a tensor used twice receives the sum of both gradients."""
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = (w * 3.0).sum() + (w * w).sum()
        backward(loss)
        np.testing.assert_allclose(w.grad, 3.0 + 2.0 * w.data)

    def test_gradient_accumulates_across_backward_calls(self, tape):
        """Test grads add up until zero_grad is called."""
        w = Tensor([1.0], requires_grad=True)
        backward((w * 2.0).sum())
        backward((w * 5.0).sum())
        np.testing.assert_allclose(w.grad, [7.0])
        w.zero_grad()
        assert w.grad is None

    def test_broadcast_gradient_is_reduced(self, tape):
        """Test broadcasting operands get gradients of their own shape."""
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        backward((x + b).sum())
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_non_scalar_loss_rejected(self, tape):
        """Test backward refuses a non-scalar loss."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError, match="scalar"):
            backward(w * 2.0)

    def test_constant_loss_rejected(self):
        """Test backward on a loss with no differentiable inputs."""
        with pytest.raises(GradientError, match="not on the tape"):
            backward(Tensor([1.0, 2.0]).sum())

    def test_backward_twice_over_same_graph(self, tape):
        """Test a consumed graph cannot be walked again."""
        w = Tensor([1.0], requires_grad=True)
        loss = (w * w).sum()
        backward(loss)
        with pytest.raises(GradientError):
            backward(loss)

    def test_backward_prunes_only_reachable_nodes(self, tape):
        """Test unrelated graphs stay on the tape."""
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        loss_a = (a * a).sum()
        loss_b = (b * 3.0).sum()
        backward(loss_a)
        assert len(tape) == 2
        backward(loss_b)
        assert len(tape) == 0
        np.testing.assert_allclose(b.grad, [3.0])

    def test_separate_tapes_are_disjoint(self):
        """Test ops record on the innermost active tape."""
        w = Tensor([1.0], requires_grad=True)
        with Tape() as outer:
            with Tape() as inner:
                loss = (w * 4.0).sum()
            assert len(inner) == 2
            assert len(outer) == 0
            with pytest.raises(GradientError):
                outer.backward(loss)
            inner.backward(loss)
        np.testing.assert_allclose(w.grad, [4.0])

    def test_no_grad_skips_recording(self, tape):
        """Test no_grad produces constants."""
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = w * 2.0
        assert not out.requires_grad
        assert len(tape) == 0

    def test_getitem_gradient_scatters(self, tape):
        """Test indexing routes gradient to the picked elements, with repeats."""
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(w[np.array([0, 0, 2])].sum())
        np.testing.assert_allclose(w.grad, [2.0, 0.0, 1.0])

    def test_concat_splits_gradient(self, tape):
        """Test concat hands each input its own slice of the gradient."""
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        weights = Tensor(np.arange(6.0).reshape(3, 2))
        backward((concat([a, b], axis=0) * weights).sum())
        np.testing.assert_allclose(a.grad, [[0.0, 1.0]])
        np.testing.assert_allclose(b.grad, [[2.0, 3.0], [4.0, 5.0]])

    def test_float64_gradients_keep_dtype(self, tape, float64):
        """Test grads are stored in the parameter dtype."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward((w * w).sum())
        assert w.grad.dtype == np.float64
