"""Parameter registry shared by every model component."""

import logging
from typing import Any, Dict, Iterator, List, Mapping, Tuple

import numpy as np

from fpvt_tensor import Tensor

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD) -> Tensor:
    """Learnable tensor drawn from N(0, std^2), redrawing values beyond two std."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2.0 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * std
    return Tensor(values, requires_grad=True)


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Base class for model components.

    Assigning a Tensor attribute registers it as a parameter and assigning a
    Module registers it as a child, so ``named_parameters`` yields dotted
    names in registration order (``stages.0.embed.weight``). Buffers are
    plain arrays that are persisted but never optimized.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Tensor):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """Register a persisted, non-learnable array (e.g. running statistics)."""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buffer in self._buffers.items():
            yield prefix + name, buffer
        for name, child in self._modules.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        """Exact learnable parameter count from the registry."""
        return sum(param.size for _, param in self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._modules.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = {name: param.data.copy() for name, param in self.named_parameters()}
        state.update({name: buffer.copy() for name, buffer in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy values into the existing parameters and buffers in place.

        Raises:
            CheckpointError: On missing or unexpected names (strict) or shape mismatch
        """
        targets: Dict[str, np.ndarray] = {name: param.data for name, param in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        if strict:
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            if missing or unexpected:
                raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, value in state.items():
            target = targets.get(name)
            if target is None:
                continue
            if target.shape != value.shape:
                raise CheckpointError(f"'{name}' has shape {value.shape} in state, {target.shape} in model")
            target[...] = value
        logger.debug(f"Loaded {len(state)} arrays into {type(self).__name__}")


class ModuleList(Module):
    """Ordered children registered as ``0``, ``1``, ..."""

    def __init__(self, modules: List[Module]):
        super().__init__()
        self._items: List[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]
