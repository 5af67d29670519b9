"""Overlapping convolutional patch embedding and positional tables.

An image (or the previous stage's feature map) is tokenized by a strided
convolution with kernel 2f+1, stride s and padding f, so neighbouring
patches share pixels. The sliding-window patch count formula is kept as a
separate checker because it counts windows differently from the
convolution (see :func:`patch_count`).
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import numpy as np

from fpvt_tensor import Tensor, as_tensor, pad
from fpvt_tensor import functional as F

from .exceptions import ConfigError, ConfigWarning, ShapeError
from .layers import LayerNorm
from .module import Module, trunc_normal, zeros

logger = logging.getLogger(__name__)


@dataclass
class IpeConfig:
    """Patch embedding geometry: kernel 2*pad+1, stride, out_channels kernels.

    With ``overlap=False`` the embedding degrades to the non-overlapping
    baseline (kernel == stride, no padding).
    """

    stride: int
    pad: int
    out_channels: int
    overlap: bool = True

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.stride < 1:
            raise ConfigError(f"patch stride must be positive, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"patch padding must be non-negative, got {self.pad}")
        if self.out_channels < 1:
            raise ConfigError(f"patch embedding needs at least one kernel, got {self.out_channels}")

    @property
    def kernel(self) -> int:
        return 2 * self.pad + 1 if self.overlap else self.stride

    @property
    def padding(self) -> int:
        return self.pad if self.overlap else 0

    @property
    def overlaps(self) -> bool:
        """Whether neighbouring patches share pixels."""
        return self.kernel > self.stride

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IpeConfig":
        return cls(**data)


@dataclass
class TokenSequence:
    """Tokens B x N x C plus the grid they were flattened from (row-major)."""

    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3:
            raise ShapeError(f"tokens must be B x N x C, got shape {self.tokens.shape}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ShapeError(f"grid must be positive, got {self.grid_h}x{self.grid_w}")
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"{self.tokens.shape[1]} tokens do not fill a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.grid_h, self.grid_w)

    def to_map(self) -> Tensor:
        """B x C x grid_h x grid_w view of the tokens."""
        return self.tokens.transpose(0, 2, 1).reshape(self.batch, self.channels, self.grid_h, self.grid_w)

    @classmethod
    def from_map(cls, feature_map: Tensor) -> "TokenSequence":
        batch, channels, height, width = feature_map.shape
        tokens = feature_map.reshape(batch, channels, height * width).transpose(0, 2, 1)
        return cls(tokens, height, width)


def valid_strides(w: int, h: int, patch: int) -> List[int]:
    """Window steps (patch - overlap) that tile both sides exactly."""
    return [step for step in range(1, patch + 1) if w % step == 0 and h % step == 0]


def patch_count(w: int, h: int, patch: int, overlap: int) -> int:
    """Sliding-window patch count (w/(patch-overlap) - 1) * (h/(patch-overlap) - 1).

    This is the window-based count; the convolutional embedding produces
    (h/s)*(w/s) tokens instead, and the two disagree in general.

    Raises:
        ConfigError: If overlap is not in [0, patch) or the step does not divide w and h
    """
    if patch < 1 or overlap < 0 or overlap >= patch:
        raise ConfigError(f"need patch > overlap >= 0, got patch={patch}, overlap={overlap}")
    if overlap == 0:
        logger.warning(f"patch={patch} with overlap 0 is a non-overlapping configuration")
        warnings.warn(f"patch={patch} with overlap 0 is a non-overlapping configuration", ConfigWarning, stacklevel=2)
    step = patch - overlap
    if w % step or h % step:
        raise ConfigError(
            f"step {step} (patch {patch} - overlap {overlap}) does not divide {w}x{h}; "
            f"valid strides: {valid_strides(w, h, patch)}"
        )
    return (w // step - 1) * (h // step - 1)


class PatchEmbed(Module):
    """Convolutional tokenizer followed by a token layer norm."""

    def __init__(self, cfg: IpeConfig, in_channels: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.weight = trunc_normal(rng, (cfg.out_channels, in_channels, cfg.kernel, cfg.kernel))
        self.bias = zeros((cfg.out_channels,))
        self.norm = LayerNorm(cfg.out_channels)

    def forward(self, x: Tensor, ceil_mode: bool = False) -> TokenSequence:
        return embed(x, self.cfg, self, ceil_mode=ceil_mode)


def embed_grid(size: int, stride: int, ceil_mode: bool) -> int:
    """Grid side produced from an input side, or raise if strict and not divisible."""
    if size % stride and not ceil_mode:
        raise ShapeError(f"stride {stride} does not divide input side {size}")
    return math.ceil(size / stride)


def embed(x: Tensor, cfg: IpeConfig, weights: PatchEmbed, ceil_mode: bool = False) -> TokenSequence:
    """Tokenize a B x C x H x W map into (H/s)(W/s) layer-normed tokens of width p.

    Args:
        x: Input image or feature map
        cfg: Embedding geometry
        weights: Convolution and norm parameters
        ceil_mode: Accept sides not divisible by the stride and produce ceil(H/s)

    Raises:
        ShapeError: If the stride does not divide H and W (strict mode) or channels disagree
    """
    if x.ndim != 4:
        raise ShapeError(f"embed expects B x C x H x W input, got shape {x.shape}")
    batch, channels, height, width = x.shape
    if channels != weights.in_channels:
        raise ShapeError(f"embed expects {weights.in_channels} input channels, got {channels}")
    grid_h = embed_grid(height, cfg.stride, ceil_mode)
    grid_w = embed_grid(width, cfg.stride, ceil_mode)
    if not cfg.overlap and (height % cfg.stride or width % cfg.stride):
        # without padding a kernel == stride conv floors; pad up to the next multiple
        x = pad(x, [(0, 0), (0, 0), (0, grid_h * cfg.stride - height), (0, grid_w * cfg.stride - width)])
        logger.debug(f"embed padded {height}x{width} to {grid_h * cfg.stride}x{grid_w * cfg.stride}")
    feature_map = F.conv2d(x, weights.weight, weights.bias, stride=cfg.stride, padding=cfg.padding)
    if feature_map.shape[2:] != (grid_h, grid_w):
        raise ShapeError(f"embed produced grid {feature_map.shape[2:]}, expected {(grid_h, grid_w)}")
    seq = TokenSequence.from_map(feature_map)
    return seq.with_tokens(weights.norm(seq.tokens))


def resample_table(table: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Bilinearly resample a square (side*side) x C table onto a grid_h x grid_w grid."""
    n_ref, channels = table.shape
    side = math.isqrt(n_ref)
    if side * side != n_ref:
        raise ShapeError(f"positional table with {n_ref} rows is not a square grid")
    rows = as_tensor(F.interpolation_matrix(side, grid_h, table.dtype), like=table)
    cols = as_tensor(F.interpolation_matrix(side, grid_w, table.dtype), like=table)
    by_rows = F.matmul(rows, table.reshape(side, side * channels)).reshape(grid_h, side, channels)
    return F.matmul(cols, by_rows).reshape(grid_h * grid_w, channels)


def add_positional(seq: TokenSequence, table: Tensor) -> TokenSequence:
    """Add a positional table, resampling it when its grid differs from the token grid.

    Raises:
        ShapeError: On channel mismatch or a non-square table
    """
    if table.ndim != 2:
        raise ShapeError(f"positional table must be N x C, got shape {table.shape}")
    n_ref, channels = table.shape
    if channels != seq.channels:
        raise ShapeError(f"positional table has {channels} channels, tokens have {seq.channels}")
    side = math.isqrt(n_ref)
    if side * side != n_ref:
        raise ShapeError(f"positional table with {n_ref} rows is not a square grid")
    if (seq.grid_h, seq.grid_w) != (side, side):
        logger.debug(f"resampling positional table {side}x{side} to {seq.grid_h}x{seq.grid_w}")
        table = resample_table(table, seq.grid_h, seq.grid_w)
    return seq.with_tokens(seq.tokens + table)
