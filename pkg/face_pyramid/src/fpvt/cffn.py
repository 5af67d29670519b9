"""Convolutional feed-forward network.

Tokens are expanded by a linear layer, laid back out on their grid, mixed
spatially by a 3x3 depthwise convolution and across channels by a 1x1
pointwise convolution, batch-normalized, passed through GELU, flattened and
contracted back to the stage width.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple

import numpy as np

from fpvt_tensor import Tensor
from fpvt_tensor import functional as F

from .exceptions import ConfigError, ShapeError
from .layers import BatchNorm2d, Linear
from .module import Module, trunc_normal, zeros
from .patch_embed import TokenSequence

logger = logging.getLogger(__name__)


@dataclass
class CffnConfig:
    channels: int
    expand_ratio: int
    kernel: int = 3

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.channels < 1:
            raise ConfigError(f"feed-forward channels must be positive, got {self.channels}")
        if self.expand_ratio < 1:
            raise ConfigError(f"expand ratio must be positive, got {self.expand_ratio}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"depthwise kernel must be odd, got {self.kernel}")

    @property
    def hidden(self) -> int:
        return self.channels * self.expand_ratio

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CffnConfig":
        return cls(**data)


def depthwise_param_count(k: int, n_in: int, n_out: int) -> Tuple[int, int]:
    """Filter weights of a depthwise+pointwise pair versus a dense k x k convolution.

    Returns:
        (k*k*n_in + n_in*n_out, k*k*n_in*n_out)
    """
    if k < 1 or n_in < 1 or n_out < 1:
        raise ConfigError(f"parameter count needs positive sizes, got k={k}, n_in={n_in}, n_out={n_out}")
    return k * k * n_in + n_in * n_out, k * k * n_in * n_out


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.weight = trunc_normal(rng, (channels, kernel, kernel))
        self.bias = zeros((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias)


class PointwiseConv(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.weight = trunc_normal(rng, (out_channels, in_channels))
        self.bias = zeros((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return F.pointwise_conv(x, self.weight, self.bias)


class ConvFeedForward(Module):
    """fc1 -> depthwise -> pointwise -> batch norm -> GELU -> fc2."""

    def __init__(self, cfg: CffnConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.fc1 = Linear(cfg.channels, cfg.hidden, rng)
        self.depthwise = DepthwiseConv(cfg.hidden, cfg.kernel, rng)
        self.pointwise = PointwiseConv(cfg.hidden, cfg.hidden, rng)
        self.norm = BatchNorm2d(cfg.hidden)
        self.fc2 = Linear(cfg.hidden, cfg.channels, rng)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return cffn_forward(x, self.cfg, self)

    def lightweight_weight_count(self) -> int:
        """Filter weights of the depthwise+pointwise pair, read from the registry."""
        return self.depthwise.weight.size + self.pointwise.weight.size


class MlpFeedForward(Module):
    """Plain fc1 -> GELU -> fc2 block used when the convolutional path is disabled."""

    def __init__(self, cfg: CffnConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.fc1 = Linear(cfg.channels, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, cfg.channels, rng)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return x.with_tokens(self.fc2(F.gelu(self.fc1(x.tokens))))


def cffn_forward(x: TokenSequence, cfg: CffnConfig, weights: ConvFeedForward) -> TokenSequence:
    """Run the convolutional feed-forward block; output shape equals input shape.

    Raises:
        ShapeError: If the token width does not match cfg.channels
    """
    if x.channels != cfg.channels:
        raise ShapeError(f"feed-forward expects {cfg.channels} channels, got {x.channels}")
    hidden = x.with_tokens(weights.fc1(x.tokens)).to_map()
    hidden = weights.depthwise(hidden)
    hidden = weights.pointwise(hidden)
    hidden = F.gelu(weights.norm(hidden))
    tokens = TokenSequence.from_map(hidden).tokens
    return x.with_tokens(weights.fc2(tokens))
