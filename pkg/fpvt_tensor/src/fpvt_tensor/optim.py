"""AdamW and SGD optimizers over a named parameter registry."""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np

from .exceptions import DataError, GradientError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

NamedParams = Union[Mapping[str, Tensor], Iterable[Tuple[str, Tensor]]]


@dataclass
class OptimizerState:
    """Hyperparameters, step count and per-parameter moment buffers.

    ``buffers`` maps a slot name (``exp_avg``, ``exp_avg_sq``, ``momentum``)
    to a parameter-name -> array table; arrays are shape-matched to their
    parameters.
    """

    kind: str
    lr: float
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    momentum: float = 0.0
    step: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        """Scalar fields only; buffers are persisted as tensors."""
        return {
            "kind": self.kind,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object], buffers: Dict[str, Dict[str, np.ndarray]]) -> "OptimizerState":
        betas = tuple(data.get("betas", (0.9, 0.999)))  # type: ignore[arg-type]
        return cls(
            kind=str(data["kind"]),
            lr=float(data["lr"]),  # type: ignore[arg-type]
            betas=(float(betas[0]), float(betas[1])),
            eps=float(data.get("eps", 1e-8)),  # type: ignore[arg-type]
            weight_decay=float(data.get("weight_decay", 0.0)),  # type: ignore[arg-type]
            momentum=float(data.get("momentum", 0.0)),  # type: ignore[arg-type]
            step=int(data.get("step", 0)),  # type: ignore[arg-type]
            buffers=buffers,
        )


class Optimizer:
    """Base class: owns the parameter registry and the state; subclasses implement ``_update``."""

    kind = "base"
    slots: Tuple[str, ...] = ()

    def __init__(self, params: NamedParams, state: OptimizerState):
        items = params.items() if isinstance(params, Mapping) else params
        self.params: Dict[str, Tensor] = dict(items)
        if not self.params:
            raise DataError(f"{self.kind}: optimizer got an empty parameter list")
        self.state = state
        for slot in self.slots:
            self.state.buffers.setdefault(slot, {})

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        """Apply one update to every trainable parameter.

        Raises:
            GradientError: If a trainable parameter has no gradient
        """
        for name, param in self.params.items():
            if param.requires_grad and param.grad is None:
                raise GradientError(f"{self.kind}: parameter '{name}' has no gradient")
        self.state.step += 1
        for name, param in self.params.items():
            if param.requires_grad:
                self._update(name, param, param.grad.astype(param.dtype, copy=False))  # type: ignore[union-attr]
        logger.debug(f"{self.kind} step {self.state.step} over {len(self.params)} parameters")

    def _update(self, name: str, param: Tensor, grad: np.ndarray) -> None:
        raise NotImplementedError

    def _buffer(self, slot: str, name: str, param: Tensor) -> np.ndarray:
        table = self.state.buffers[slot]
        if name not in table:
            table[name] = np.zeros_like(param.data)
        return table[name]

    def state_dict(self) -> OptimizerState:
        """Deep copy of the optimizer state."""
        return copy.deepcopy(self.state)

    def load_state_dict(self, state: OptimizerState) -> None:
        """Replace the state, checking kind and buffer shapes.

        Raises:
            DataError: If the state belongs to another optimizer kind
            ShapeError: If a buffer does not match its parameter
        """
        if state.kind != self.kind:
            raise DataError(f"cannot load {state.kind} state into a {self.kind} optimizer")
        for slot, table in state.buffers.items():
            for name, buffer in table.items():
                param = self.params.get(name)
                if param is None:
                    raise DataError(f"{self.kind}: state has buffer for unknown parameter '{name}'")
                if buffer.shape != param.shape:
                    raise ShapeError(
                        f"{self.kind}: {slot} buffer for '{name}' has shape {buffer.shape}, "
                        f"parameter has {param.shape}"
                    )
        self.state = copy.deepcopy(state)
        for slot in self.slots:
            self.state.buffers.setdefault(slot, {})


class AdamW(Optimizer):
    """Adam with decoupled weight decay: the decay scales the weights directly."""

    kind = "adamw"
    slots = ("exp_avg", "exp_avg_sq")

    def __init__(
        self,
        params: NamedParams,
        lr: float = 3e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        super().__init__(
            params,
            OptimizerState(kind=self.kind, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay),
        )

    def _update(self, name: str, param: Tensor, grad: np.ndarray) -> None:
        state = self.state
        beta1, beta2 = state.betas
        exp_avg = self._buffer("exp_avg", name, param)
        exp_avg_sq = self._buffer("exp_avg_sq", name, param)
        if state.weight_decay:
            param.data *= 1.0 - state.lr * state.weight_decay
        exp_avg *= beta1
        exp_avg += (1.0 - beta1) * grad
        exp_avg_sq *= beta2
        exp_avg_sq += (1.0 - beta2) * grad * grad
        m_hat = exp_avg / (1.0 - beta1**state.step)
        v_hat = exp_avg_sq / (1.0 - beta2**state.step)
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)


class SGD(Optimizer):
    """SGD with heavy-ball momentum and coupled L2 weight decay."""

    kind = "sgd"
    slots = ("momentum",)

    def __init__(
        self,
        params: NamedParams,
        lr: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 0.05,
    ):
        super().__init__(
            params,
            OptimizerState(kind=self.kind, lr=lr, momentum=momentum, weight_decay=weight_decay),
        )

    def _update(self, name: str, param: Tensor, grad: np.ndarray) -> None:
        state = self.state
        if state.weight_decay:
            grad = grad + state.weight_decay * param.data
        if state.momentum:
            table = state.buffers["momentum"]
            if name not in table:
                table[name] = np.array(grad, dtype=param.dtype)
            else:
                table[name] *= state.momentum
                table[name] += grad
            grad = table[name]
        param.data -= (state.lr * grad).astype(param.dtype, copy=False)


OPTIMIZERS = {AdamW.kind: AdamW, SGD.kind: SGD}
