"""Central finite-difference oracle for analytic gradients.

Example:
    with default_dtype(np.float64):
        for case in op_cases(seed=0):
            assert_gradients(case)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import functional as F
from .exceptions import DataError, GradCheckError
from .tensor import Tape, Tensor, as_tensor, backward, concat, no_grad, pad, stack

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
FD_STEP = 1e-5
_DENOMINATOR_FLOOR = 1e-6
ZERO_GRAD_ATOL = 1e-8


@dataclass
class GradCheckCase:
    """A scalar loss closure plus the tensors whose gradients are checked.

    ``loss_fn`` must rebuild the graph on every call from the current values
    of ``params`` (the checker perturbs them in place).
    """

    name: str
    loss_fn: Callable[[], Tensor]
    params: Dict[str, Tensor]


@dataclass
class GradCheckResult:
    """Worst element of one case.

    ``zero_params`` lists tensors whose sampled analytic and numerical
    gradients are all within ZERO_GRAD_ATOL of zero; they are matched
    absolutely and left out of the relative error.
    """

    name: str
    max_rel_error: float
    param: str
    index: Tuple[int, ...]
    checked: int
    tolerance: float
    zero_params: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "param": self.param,
            "index": list(self.index),
            "checked": self.checked,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "zero_params": list(self.zero_params),
        }


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, 1e-6)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _DENOMINATOR_FLOOR)


def numerical_gradient(
    loss_fn: Callable[[], Tensor],
    tensor: Tensor,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
    step: float = FD_STEP,
) -> np.ndarray:
    """Central differences (L(x+h) - L(x-h)) / 2h at the given indices (all by default)."""
    grad = np.zeros_like(tensor.data)
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    with no_grad():
        for index in indices:
            original = tensor.data[index]
            tensor.data[index] = original + step
            loss_plus = loss_fn().item()
            tensor.data[index] = original - step
            loss_minus = loss_fn().item()
            tensor.data[index] = original
            grad[index] = (loss_plus - loss_minus) / (2.0 * step)
    return grad


def analytic_gradients(case: GradCheckCase) -> Dict[str, np.ndarray]:
    """Run the case once on a fresh tape and collect the gradient of every checked tensor."""
    for tensor in case.params.values():
        tensor.zero_grad()
    with Tape():
        loss = case.loss_fn()
        backward(loss)
    return {
        name: (tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data))
        for name, tensor in case.params.items()
    }


def _sample_indices(shape: Tuple[int, ...], max_samples: Optional[int], rng: np.random.Generator) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape)) if shape else 1
    if max_samples is None or size <= max_samples:
        return list(np.ndindex(*shape))
    flat = np.sort(rng.choice(size, size=max_samples, replace=False))
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def check_gradients(
    case: GradCheckCase,
    tolerance: float = DEFAULT_TOLERANCE,
    max_samples: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic and numerical gradients of every checked tensor.

    Args:
        case: Loss closure and checked tensors, all float64
        tolerance: Largest acceptable relative error
        max_samples: Check at most this many elements per tensor (sampled with seed)
        seed: Seed for element sampling

    Returns:
        Result describing the worst element

    Raises:
        DataError: If a checked tensor is not float64
    """
    for name, tensor in case.params.items():
        if tensor.dtype != np.float64:
            raise DataError(f"{case.name}: gradient checks need float64 tensors, '{name}' is {tensor.dtype}")
    analytic = analytic_gradients(case)
    rng = np.random.default_rng(seed)
    worst = GradCheckResult(case.name, 0.0, "", (), 0, tolerance)
    checked = 0
    zero_params: List[str] = []
    for name, tensor in case.params.items():
        indices = _sample_indices(tensor.shape, max_samples, rng)
        numeric = numerical_gradient(case.loss_fn, tensor, indices)
        checked += len(indices)
        if all(max(abs(analytic[name][i]), abs(numeric[i])) <= ZERO_GRAD_ATOL for i in indices):
            zero_params.append(name)
            continue
        for index in indices:
            error = relative_error(float(analytic[name][index]), float(numeric[index]))
            if error > worst.max_rel_error or not worst.param:
                worst = GradCheckResult(case.name, error, name, index, 0, tolerance)
    worst.checked = checked
    worst.zero_params = zero_params
    logger.debug(f"gradcheck {case.name}: max rel error {worst.max_rel_error:.3e} over {checked} elements")
    return worst


def assert_gradients(
    case: GradCheckCase,
    tolerance: float = DEFAULT_TOLERANCE,
    max_samples: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Like :func:`check_gradients` but raises on failure.

    Raises:
        GradCheckError: Naming the case, the tensor and the worst index
    """
    result = check_gradients(case, tolerance, max_samples, seed)
    if not result.passed:
        raise GradCheckError(f"{result.name}[{result.param}]", result.max_rel_error, result.index, tolerance)
    return result


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar loss sum(out * weights) with fixed weights, so every output element matters."""
    return (out * as_tensor(weights, like=out)).sum()


def _param(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64)


def _case(name: str, rng: np.random.Generator, forward: Callable[[], Tensor], params: Dict[str, Tensor]) -> GradCheckCase:
    with no_grad():
        shape = forward().shape
    weights = rng.normal(size=shape)
    return GradCheckCase(name, lambda: weighted_sum(forward(), weights), params)


def op_cases(seed: int = 0) -> List[GradCheckCase]:
    """One small float64 case per differentiable op, plus a composite graph."""
    rng = np.random.default_rng(seed)
    cases: List[GradCheckCase] = []

    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    cases.append(_case("matmul", rng, lambda: F.matmul(a, b), {"a": a, "b": b}))

    ba, bb = _param(rng, 2, 3, 4), _param(rng, 4, 2)
    cases.append(_case("matmul_batched", rng, lambda: F.matmul(ba, bb), {"a": ba, "b": bb}))

    s = _param(rng, 3, 5, low=-3.0, high=3.0)
    cases.append(_case("softmax_rows", rng, lambda: F.softmax_rows(s), {"x": s}))
    cases.append(_case("log_softmax", rng, lambda: F.log_softmax(s), {"x": s}))

    logits = _param(rng, 4, 3, low=-2.0, high=2.0)
    targets = rng.integers(0, 3, size=4)
    cases.append(GradCheckCase("cross_entropy", lambda: F.cross_entropy(logits, targets), {"logits": logits}))

    x = _param(rng, 2, 2, 5, 5)
    w, bias = _param(rng, 3, 2, 3, 3), _param(rng, 3)
    cases.append(_case(
        "conv2d", rng, lambda: F.conv2d(x, w, bias, stride=2, padding=1), {"x": x, "weight": w, "bias": bias}
    ))

    dx, dw, db = _param(rng, 2, 3, 4, 4), _param(rng, 3, 3, 3), _param(rng, 3)
    cases.append(_case(
        "depthwise_conv2d", rng, lambda: F.depthwise_conv2d(dx, dw, db), {"x": dx, "weight": dw, "bias": db}
    ))

    px, mix, pb = _param(rng, 2, 3, 3, 3), _param(rng, 4, 3), _param(rng, 4)
    cases.append(_case(
        "pointwise_conv", rng, lambda: F.pointwise_conv(px, mix, pb), {"x": px, "mix": mix, "bias": pb}
    ))

    # distinct, well separated values keep every argmax stable under perturbation
    mx = Tensor(rng.permutation(196).reshape(2, 2, 7, 7) * 0.01, requires_grad=True, dtype=np.float64)
    cases.append(_case("adaptive_max_pool2d", rng, lambda: F.adaptive_max_pool2d(mx, 3), {"x": mx}))

    lx, lg, lb = _param(rng, 2, 3, 6, low=-2.0, high=2.0), _param(rng, 6), _param(rng, 6)
    cases.append(_case("layer_norm", rng, lambda: F.layer_norm(lx, lg, lb), {"x": lx, "gain": lg, "bias": lb}))

    nx, ng, nb = _param(rng, 3, 2, 3, 3, low=-2.0, high=2.0), _param(rng, 2), _param(rng, 2)
    train_state = F.BatchNormState.create(2, np.dtype(np.float64))
    cases.append(_case(
        "batch_norm_train", rng, lambda: F.batch_norm(nx, train_state, ng, nb, training=True),
        {"x": nx, "gain": ng, "bias": nb},
    ))
    eval_state = F.BatchNormState(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
    cases.append(_case(
        "batch_norm_eval", rng, lambda: F.batch_norm(nx, eval_state, ng, nb, training=False),
        {"x": nx, "gain": ng, "bias": nb},
    ))

    g = _param(rng, 4, 5, low=-3.0, high=3.0)
    cases.append(_case("gelu", rng, lambda: F.gelu(g), {"x": g}))

    pos = _param(rng, 3, 4, low=0.5, high=2.0)
    den = _param(rng, 3, 4, low=0.5, high=2.0)
    cases.append(_case(
        "elementwise", rng,
        lambda: (pos.exp() + pos.log() + pos.sqrt() + (pos * den).tanh() - pos / den + pos**3),
        {"x": pos, "y": den},
    ))

    t = _param(rng, 2, 3, 4)
    u = _param(rng, 2, 3, 4)
    cases.append(_case(
        "shape_ops", rng,
        lambda: concat([
            t.transpose(2, 0, 1).reshape(4, 6),
            stack([t.sum(axis=0), u.mean(axis=0)], axis=0).reshape(4, 6),
            pad(u[:, 1, :], [(1, 1), (0, 0)]).reshape(1, 16)[:, :6] * u[0, 0, 0],
        ], axis=0),
        {"t": t, "u": u},
    ))

    cx, cw, cm = _param(rng, 1, 2, 6, 6), _param(rng, 3, 2, 3, 3), _param(rng, 27, 4)
    cases.append(_case(
        "composite",
        rng,
        lambda: F.softmax_rows(F.matmul(F.adaptive_max_pool2d(F.conv2d(cx, cw, padding=1), 3).reshape(1, 27), cm)),
        {"x": cx, "conv": cw, "proj": cm},
    ))
    return cases
