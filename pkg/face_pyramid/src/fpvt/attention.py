"""Face spatial-reduction attention and the encoder layer built on it.

Keys and values are computed from a shortened sequence: tokens are first
regrouped into non-overlapping r x r blocks and projected back to the stage
width (length / r^2), then adaptively max-pooled to at most 7 x 7. Queries
keep the full length, so the attention output lines up with the residual.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple, Union

import numpy as np

from fpvt_tensor import Tensor, pad
from fpvt_tensor import functional as F

from .cffn import CffnConfig, ConvFeedForward, MlpFeedForward
from .exceptions import ConfigError, ShapeError
from .layers import LayerNorm, Linear
from .module import Module
from .patch_embed import TokenSequence

logger = logging.getLogger(__name__)

POOL_OUT = 7


@dataclass
class AttnConfig:
    """Attention geometry of one stage."""

    channels: int
    heads: int
    reduction: int = 1
    pool_out: int = POOL_OUT
    dropout: float = 0.0

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.channels < 1 or self.heads < 1:
            raise ConfigError(f"attention needs positive channels and heads, got {self.channels}/{self.heads}")
        if self.channels % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide {self.channels} channels")
        if self.reduction < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {self.reduction}")
        if self.pool_out < 1:
            raise ConfigError(f"pool output size must be >= 1, got {self.pool_out}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"attention dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttnConfig":
        return cls(**data)


def reduced_grid(grid_h: int, grid_w: int, reduction: int) -> Tuple[int, int]:
    return math.ceil(grid_h / reduction), math.ceil(grid_w / reduction)


def kv_grid(grid_h: int, grid_w: int, cfg: AttnConfig) -> Tuple[int, int]:
    """Key/value grid after zero-padded block reduction and pooling."""
    h, w = reduced_grid(grid_h, grid_w, cfg.reduction)
    if h <= cfg.pool_out and w <= cfg.pool_out:
        return h, w
    return cfg.pool_out, cfg.pool_out


def kv_length(grid_h: int, grid_w: int, cfg: AttnConfig) -> int:
    h, w = kv_grid(grid_h, grid_w, cfg)
    return h * w


class FaceSpatialReductionAttention(Module):
    """Projection weights of one attention block.

    ``q``, ``k`` and ``v`` hold the per-head projections side by side
    (head j owns columns j*d_h to (j+1)*d_h). ``reducer`` maps r*r*c
    channels of a block back to c and only exists when r > 1.
    """

    def __init__(self, cfg: AttnConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng)
        self.v = Linear(c, c, rng)
        self.proj = Linear(c, c, rng)
        if cfg.reduction > 1:
            self.reducer = Linear(cfg.reduction * cfg.reduction * c, c, rng)
            self.reduce_norm = LayerNorm(c)
        object.__setattr__(self, "dropout_rng", np.random.default_rng(int(rng.integers(2**32))))

    def forward(self, x: TokenSequence) -> TokenSequence:
        return fsra_forward(x, self.cfg, self)


def spatial_reduce(
    x: TokenSequence,
    r: int,
    reducer: Linear,
    norm: LayerNorm,
    pad_to_multiple: bool = False,
) -> TokenSequence:
    """Merge r x r token blocks into single tokens of width c.

    Each block is flattened row-major and concatenated channelwise to r*r*c,
    projected back to c and layer-normed.

    Args:
        x: Tokens on a grid
        r: Block side
        reducer: Projection (r*r*c) -> c
        norm: Layer norm over the reduced tokens
        pad_to_multiple: Zero-pad the grid bottom/right instead of rejecting it

    Raises:
        ShapeError: If r does not divide the grid and padding is not allowed
    """
    if r < 1:
        raise ShapeError(f"reduction ratio must be >= 1, got {r}")
    if reducer.in_features != r * r * x.channels:
        raise ShapeError(f"reducer expects {reducer.in_features} inputs, blocks have {r * r * x.channels}")
    grid_h, grid_w = x.grid_h, x.grid_w
    tokens = x.tokens
    if grid_h % r or grid_w % r:
        if not pad_to_multiple:
            raise ShapeError(f"reduction ratio {r} does not divide grid {grid_h}x{grid_w}")
        new_h, new_w = reduced_grid(grid_h, grid_w, r)
        feature_map = pad(x.to_map(), [(0, 0), (0, 0), (0, new_h * r - grid_h), (0, new_w * r - grid_w)])
        grid_h, grid_w = new_h * r, new_w * r
        tokens = TokenSequence.from_map(feature_map).tokens
    out_h, out_w = grid_h // r, grid_w // r
    blocks = (
        tokens.reshape(x.batch, out_h, r, out_w, r, x.channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(x.batch, out_h * out_w, r * r * x.channels)
    )
    return TokenSequence(norm(reducer(blocks)), out_h, out_w)


def pool_kv(x: TokenSequence, out_size: int) -> TokenSequence:
    """Adaptive max pool of the token grid to out_size x out_size; grids already that small pass through."""
    if x.grid_h <= out_size and x.grid_w <= out_size:
        return x
    pooled = F.adaptive_max_pool2d(x.to_map(), out_size)
    return TokenSequence.from_map(pooled)


def multi_head_attention(
    q: TokenSequence,
    kv: TokenSequence,
    weights: FaceSpatialReductionAttention,
    return_attention: bool = False,
) -> Union[TokenSequence, Tuple[TokenSequence, Tensor]]:
    """softmax((q Wq)(kv Wk)^T / sqrt(d_h)) (kv Wv) per head, heads concatenated and projected.

    Args:
        q: Query tokens, B x Nq x C
        kv: Key/value tokens, B x Nk x C
        weights: Projection weights
        return_attention: Also return the B x heads x Nq x Nk attention rows

    Raises:
        ShapeError: If q and kv differ in channels or batch
    """
    cfg = weights.cfg
    if q.channels != kv.channels or q.channels != cfg.channels:
        raise ShapeError(f"attention channels differ: q {q.channels}, kv {kv.channels}, weights {cfg.channels}")
    if q.batch != kv.batch:
        raise ShapeError(f"attention batch sizes differ: q {q.batch}, kv {kv.batch}")
    batch, heads, head_dim = q.batch, cfg.heads, cfg.head_dim
    queries = weights.q(q.tokens).reshape(batch, q.length, heads, head_dim).transpose(0, 2, 1, 3)
    keys = weights.k(kv.tokens).reshape(batch, kv.length, heads, head_dim).transpose(0, 2, 3, 1)
    values = weights.v(kv.tokens).reshape(batch, kv.length, heads, head_dim).transpose(0, 2, 1, 3)
    attention = F.softmax_rows(F.matmul(queries, keys) * (1.0 / math.sqrt(head_dim)))
    mixed = attention
    if weights.training and cfg.dropout > 0.0:
        mixed = F.dropout(attention, cfg.dropout, weights.dropout_rng)
    out = F.matmul(mixed, values).transpose(0, 2, 1, 3).reshape(batch, q.length, cfg.channels)
    result = q.with_tokens(weights.proj(out))
    if return_attention:
        return result, attention
    return result


def reduce_kv(x: TokenSequence, cfg: AttnConfig, weights: FaceSpatialReductionAttention) -> TokenSequence:
    """Key/value sequence: block reduction (r > 1) then pooling."""
    kv = x
    if cfg.reduction > 1:
        kv = spatial_reduce(x, cfg.reduction, weights.reducer, weights.reduce_norm, pad_to_multiple=True)
    return pool_kv(kv, cfg.pool_out)


def fsra_forward(
    x: TokenSequence,
    cfg: AttnConfig,
    weights: FaceSpatialReductionAttention,
    return_attention: bool = False,
) -> Any:
    """Attention of every token over the reduced and pooled key/value sequence.

    Output has the length and channels of x; the key/value length is
    min(ceil(h/r)*ceil(w/r), pool_out^2).
    """
    if x.channels != cfg.channels:
        raise ShapeError(f"attention expects {cfg.channels} channels, got {x.channels}")
    kv = reduce_kv(x, cfg, weights)
    logger.debug(f"fsra grid {x.grid_h}x{x.grid_w} -> kv grid {kv.grid_h}x{kv.grid_w}")
    return multi_head_attention(x, kv, weights, return_attention=return_attention)


class EncoderLayer(Module):
    """Pre-norm residual block: x + attn(norm(x)), then y + ffn(norm(y))."""

    def __init__(
        self,
        attn_cfg: AttnConfig,
        ffn_cfg: CffnConfig,
        rng: np.random.Generator,
        conv_ffn: bool = True,
    ):
        super().__init__()
        self.norm1 = LayerNorm(attn_cfg.channels)
        self.attn = FaceSpatialReductionAttention(attn_cfg, rng)
        self.norm2 = LayerNorm(attn_cfg.channels)
        self.ffn: Module = ConvFeedForward(ffn_cfg, rng) if conv_ffn else MlpFeedForward(ffn_cfg, rng)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return encoder_layer(x, self)


def encoder_layer(x: TokenSequence, weights: EncoderLayer) -> TokenSequence:
    """Apply one encoder layer; output shape equals input shape."""
    attended = weights.attn(x.with_tokens(weights.norm1(x.tokens)))
    y = x.with_tokens(x.tokens + attended.tokens)
    fed = weights.ffn(y.with_tokens(weights.norm2(y.tokens)))
    return y.with_tokens(y.tokens + fed.tokens)
