"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op records a :class:`Node` on the tape that is active for
the current thread. :func:`backward` walks that tape in reverse order, visiting
each node reachable from the loss exactly once, and accumulates gradients
additively into every tensor that requires them.

Example:
    from fpvt_tensor import Tensor, Tape, backward

    w = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
        backward(loss)
    w.grad  # [[2., 4.]]
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DataError, GradientError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)
_local = threading.local()


def get_default_dtype() -> np.dtype:
    """Get the dtype used for newly created tensors."""
    return _default_dtype


def set_default_dtype(dtype: Any) -> None:
    """Set the dtype used for newly created tensors.

    Args:
        dtype: float32 for training speed or float64 for gradient checking

    Raises:
        DataError: If dtype is not float32 or float64
    """
    global _default_dtype
    resolved = np.dtype(dtype)
    if resolved not in _SUPPORTED_DTYPES:
        raise DataError(f"Unsupported tensor dtype '{resolved}', use float32 or float64")
    _default_dtype = resolved


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[np.dtype]:
    """Temporarily switch the default dtype, e.g. to float64 for a gradient check."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield get_default_dtype()
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    """Whether ops on the current thread record nodes on the tape."""
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread (evaluation, finite differences)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs, its output and the rule mapping output grad to input grads."""

    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn
    tape: "Tape"
    consumed: bool = False


class Tape:
    """Ordered record of differentiable ops for one logical thread of control.

    Nodes are appended in creation order, so every node's inputs precede it.
    A tape is single-writer: parallel workers must each enter their own tape.
    Entering a tape makes it the active tape of the current thread.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        """Append a node; callers guarantee its inputs were recorded earlier."""
        self.nodes.append(node)

    def clear(self) -> None:
        """Drop every recorded node; their outputs can no longer be differentiated."""
        for node in self.nodes:
            node.consumed = True
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        """Propagate gradients from a scalar loss recorded on this tape.

        Args:
            loss: Scalar tensor produced by ops recorded on this tape

        Raises:
            GradientError: If the loss is not on this tape or was already consumed
        """
        root = loss._node
        if root is None or root.tape is not self:
            raise GradientError("loss is not recorded on this tape")
        if root.consumed:
            raise GradientError("backward already ran over this graph")

        reachable = set()
        pending = [root]
        while pending:
            node = pending.pop()
            if node in reachable:
                continue
            reachable.add(node)
            for tensor in node.inputs:
                parent = tensor._node
                if parent is not None and parent.tape is self and not parent.consumed:
                    pending.append(parent)

        _accumulate(loss, np.ones_like(loss.data), "loss")
        visited = 0
        for node in reversed(self.nodes):
            if node not in reachable:
                continue
            node.consumed = True
            visited += 1
            grad = node.output.grad
            if grad is None:
                continue
            input_grads = node.backward(grad)
            for tensor, tensor_grad in zip(node.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                _accumulate(tensor, tensor_grad, node.op)

        self.nodes = [node for node in self.nodes if node not in reachable]
        logger.debug(f"Backward visited {visited} nodes, {len(self.nodes)} left on tape")


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = [Tape()]
        _local.tapes = stack
    return stack


def current_tape() -> Tape:
    """Get the tape ops on the current thread record into."""
    return _tape_stack()[-1]


def _accumulate(tensor: "Tensor", grad: np.ndarray, op: str) -> None:
    if grad.shape != tensor.data.shape:
        raise ShapeError(
            f"{op} backward produced gradient of shape {grad.shape} "
            f"for tensor of shape {tensor.data.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"{op} backward produced non-finite gradient values")
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype)
    else:
        tensor.grad = tensor.grad + grad.astype(tensor.data.dtype, copy=False)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def apply_op(
    op: str,
    inputs: Sequence["Tensor"],
    data: np.ndarray,
    backward_fn: BackwardFn,
) -> "Tensor":
    """Wrap an op result as a Tensor and record it on the active tape.

    Args:
        op: Op name used in error messages and gradient reports
        inputs: Operand tensors, in the order backward_fn returns gradients
        data: Forward result
        backward_fn: Maps the output gradient to one gradient (or None) per input

    Returns:
        Output tensor, requiring grad iff recording is enabled and any input does

    Raises:
        NumericalError: If the forward result contains NaN or Inf
    """
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = current_tape()
        out._node = Node(op, tuple(inputs), out, backward_fn, tape)
        tape.record(out._node)
    return out


def as_tensor(value: ArrayLike, like: Optional["Tensor"] = None) -> "Tensor":
    """Return value unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


class Tensor:
    """Dense n-dimensional real array with an optional gradient.

    A tensor is immutable once created; only optimizers write to ``data``
    in place between steps. ``grad`` always has the shape of ``data``.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Any = None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype if dtype is not None else get_default_dtype())
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("Tensor created from non-finite values")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DataError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, off the tape, no gradient."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Elementwise arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

        return apply_op("add", (a, b), a.data + b.data, backward_fn)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

        return apply_op("sub", (a, b), a.data - b.data, backward_fn)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, like=self).__sub__(self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

        return apply_op("mul", (a, b), a.data * b.data, backward_fn)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self, other

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return (
                unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return apply_op("div", (a, b), a.data / b.data, backward_fn)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, like=self).__truediv__(self)

    def __neg__(self) -> "Tensor":
        return apply_op("neg", (self,), -self.data, lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
            return (g * exponent * a.data ** (exponent - 1),)

        return apply_op("pow", (a,), a.data**exponent, backward_fn)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        from .functional import matmul

        return matmul(self, as_tensor(other, like=self))

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return apply_op("exp", (self,), out_data, lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        a = self
        return apply_op("log", (a,), np.log(a.data), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        return apply_op("sqrt", (self,), out_data, lambda g: (0.5 * g / out_data,))

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        return apply_op("tanh", (self,), out_data, lambda g: (g * (1.0 - out_data * out_data),))

    # Reductions

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return apply_op("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), backward_fn)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # Shape manipulation

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            data = a.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from e
        return apply_op("reshape", (a,), data, lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return apply_op("transpose", (self,), self.data.transpose(axes), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index: Any) -> "Tensor":
        a = self

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return apply_op("getitem", (a,), np.array(a.data[index]), backward_fn)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from a scalar loss.

    Args:
        loss: Scalar tensor

    Raises:
        GradientError: If the loss is not scalar or is not on a tape
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data), "loss")
            return
        raise GradientError("loss is not on the tape; did any input require grad?")
    loss._node.tape.backward(loss)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray) -> List[np.ndarray]:
        return list(np.split(g, bounds, axis=axis))

    return apply_op("concat", tensors, data, backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    tensors = list(tensors)
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}: {e}") from e

    def backward_fn(g: np.ndarray) -> List[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return apply_op("stack", tensors, data, backward_fn)


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from a where condition holds, else from b."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    cond = np.asarray(condition, dtype=bool)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return unbroadcast(np.where(cond, g, 0.0), a.shape), unbroadcast(np.where(cond, 0.0, g), b.shape)

    return apply_op("where", (a, b), np.where(cond, a.data, b.data), backward_fn)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient flows only where the value was inside [low, high]."""
    inside = (x.data >= low) & (x.data <= high)
    return apply_op("clip", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


def pad(x: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero-pad every axis by (before, after)."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: got {len(widths)} pad widths for a {x.ndim}-D tensor")
    slices = tuple(slice(before, before + dim) for (before, _), dim in zip(widths, x.shape))
    return apply_op("pad", (x,), np.pad(x.data, widths), lambda g: (g[slices],))
