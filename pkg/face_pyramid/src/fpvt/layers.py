"""Basic learnable layers."""

import numpy as np

from fpvt_tensor import Tensor, get_default_dtype
from fpvt_tensor import functional as F

from .module import Module, ones, trunc_normal, zeros


class Linear(Module):
    """y = x @ weight + bias with weight stored (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = trunc_normal(rng, (in_features, out_features))
        if bias:
            self.bias = zeros((out_features,))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gain = ones((channels,))
        self.bias = zeros((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class BatchNorm2d(Module):
    """Per-channel batch normalization over B x C x H x W maps.

    Training mode normalizes with batch statistics and updates the running
    ones; eval mode normalizes with the running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.gain = ones((channels,))
        self.bias = zeros((channels,))
        self.state = F.BatchNormState.create(channels, get_default_dtype(), momentum=momentum)
        self.register_buffer("running_mean", self.state.running_mean)
        self.register_buffer("running_var", self.state.running_var)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.state, self.gain, self.bias, training=self.training)
