"""Multi-stage face pyramid vision transformer.

Each stage embeds the previous stage's map with an overlapping patch
embedding, adds its positional table, runs its encoder layers and hands a
layer-normed token grid to the next stage. The last stage's tokens are
averaged and projected to the face embedding.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from fpvt_tensor import Tensor, no_grad

from .attention import AttnConfig, EncoderLayer, kv_length
from .cffn import CffnConfig, ConvFeedForward, depthwise_param_count
from .exceptions import ConfigError, ShapeError
from .layers import LayerNorm, Linear
from .module import Module, ModuleList, trunc_normal
from .patch_embed import IpeConfig, PatchEmbed, TokenSequence, add_positional

logger = logging.getLogger(__name__)

PUBLISHED_PARAMS = 28_200_000
PUBLISHED_LABEL = "published reference, not asserted"


@dataclass
class StageConfig:
    """Hyperparameters of one pyramid stage."""

    stride: int
    pad: int
    channels: int
    layers: int
    reduction: int
    heads: int
    expand: int

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        for name in ("stride", "channels", "layers", "reduction", "heads", "expand"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stage {name} must be positive, got {getattr(self, name)}")
        if self.pad < 0:
            raise ConfigError(f"stage pad must be non-negative, got {self.pad}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StageConfig":
        return cls(**data)


@dataclass
class ModelConfig:
    """Whole-model settings.

    ``overlap_embed`` and ``conv_ffn`` switch the patch embedding and the
    feed-forward block back to their plain baselines for ablations.
    """

    image_size: int = 32
    in_channels: int = 3
    stages: List[StageConfig] = field(default_factory=list)
    embed_dim: int = 32
    seed: int = 0
    overlap_embed: bool = True
    conv_ffn: bool = True
    pool_out: int = 7
    attn_dropout: float = 0.0

    def __post_init__(self) -> None:
        if not self.stages:
            self.stages = toy_stages()
        self._validate()

    def _validate(self) -> None:
        if self.image_size < 1 or self.in_channels < 1 or self.embed_dim < 1:
            raise ConfigError("image_size, in_channels and embed_dim must be positive")
        if self.pool_out < 1:
            raise ConfigError(f"pool_out must be positive, got {self.pool_out}")
        if self.image_size % self.stages[0].stride:
            raise ConfigError(
                f"stage 1: stride {self.stages[0].stride} does not divide image size {self.image_size}"
            )
        previous_channels = 0
        previous_grid = self.image_size
        for index, (stage, grid) in enumerate(zip(self.stages, self.stage_grids()), start=1):
            if stage.channels < previous_channels:
                raise ConfigError(
                    f"stage {index}: channels {stage.channels} narrower than previous stage ({previous_channels})"
                )
            if grid >= previous_grid:
                raise ConfigError(f"stage {index}: grid {grid} does not shrink from {previous_grid}")
            try:
                self.attn_config(index - 1)
            except ConfigError as e:
                raise ConfigError(f"stage {index}: {e}") from e
            previous_channels, previous_grid = stage.channels, grid

    def stage_grids(self, image_size: Optional[int] = None) -> List[int]:
        """Grid side of every stage; stages after the first round up."""
        side = self.image_size if image_size is None else image_size
        grids = []
        for stage in self.stages:
            side = math.ceil(side / stage.stride)
            grids.append(side)
        return grids

    def attn_config(self, index: int) -> AttnConfig:
        stage = self.stages[index]
        return AttnConfig(
            channels=stage.channels,
            heads=stage.heads,
            reduction=stage.reduction,
            pool_out=self.pool_out,
            dropout=self.attn_dropout,
        )

    def cffn_config(self, index: int) -> CffnConfig:
        stage = self.stages[index]
        return CffnConfig(channels=stage.channels, expand_ratio=stage.expand)

    def ipe_config(self, index: int) -> IpeConfig:
        stage = self.stages[index]
        return IpeConfig(stride=stage.stride, pad=stage.pad, out_channels=stage.channels, overlap=self.overlap_embed)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["stages"] = [stage.to_dict() for stage in self.stages]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        data["stages"] = [StageConfig.from_dict(stage) for stage in data.get("stages", [])]
        return cls(**data)


def toy_stages() -> List[StageConfig]:
    return [
        StageConfig(stride=4, pad=3, channels=16, layers=1, reduction=2, heads=1, expand=4),
        StageConfig(stride=2, pad=1, channels=32, layers=1, reduction=1, heads=2, expand=4),
    ]


def toy_config(**overrides: Any) -> ModelConfig:
    """Two stages on 32 x 32 inputs; fast enough for desk-scale training."""
    return ModelConfig(**{"image_size": 32, "stages": toy_stages(), "embed_dim": 32, **overrides})


def fpvt_config(**overrides: Any) -> ModelConfig:
    """Four-stage schedule on 112 x 112 faces: grids 28, 14, 7, 4 and a 512-d embedding."""
    stages = [
        StageConfig(stride=4, pad=3, channels=64, layers=2, reduction=8, heads=1, expand=8),
        StageConfig(stride=2, pad=1, channels=128, layers=2, reduction=4, heads=2, expand=8),
        StageConfig(stride=2, pad=1, channels=320, layers=1, reduction=2, heads=5, expand=4),
        StageConfig(stride=2, pad=1, channels=512, layers=1, reduction=1, heads=8, expand=4),
    ]
    return ModelConfig(**{"image_size": 112, "stages": stages, "embed_dim": 512, **overrides})


PRESETS = {"toy": toy_config, "fpvt": fpvt_config}


@dataclass
class MultiScaleFeatures:
    """Per-stage token grids (strictly shrinking) and the final face embedding."""

    stages: List[TokenSequence]
    embedding: Tensor

    def __post_init__(self) -> None:
        for before, after in zip(self.stages, self.stages[1:]):
            if after.length >= before.length:
                raise ShapeError(f"stage resolutions do not shrink: {before.length} -> {after.length}")


class Stage(Module):
    def __init__(self, cfg: ModelConfig, index: int, in_channels: int, grid: int, rng: np.random.Generator):
        super().__init__()
        stage = cfg.stages[index]
        self.embed = PatchEmbed(cfg.ipe_config(index), in_channels, rng)
        self.pos = trunc_normal(rng, (grid * grid, stage.channels))
        self.blocks = ModuleList([
            EncoderLayer(cfg.attn_config(index), cfg.cffn_config(index), rng, conv_ffn=cfg.conv_ffn)
            for _ in range(stage.layers)
        ])
        self.norm = LayerNorm(stage.channels)

    def forward(self, x: Tensor, ceil_mode: bool = False) -> TokenSequence:
        seq = add_positional(self.embed(x, ceil_mode=ceil_mode), self.pos)
        for block in self.blocks:
            seq = block(seq)
        return seq.with_tokens(self.norm(seq.tokens))


class FacePyramidTransformer(Module):
    """Stage stack plus the linear projection to the face embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_channels = cfg.in_channels
        for index, grid in enumerate(cfg.stage_grids()):
            stages.append(Stage(cfg, index, in_channels, grid, rng))
            in_channels = cfg.stages[index].channels
        self.stages = ModuleList(stages)
        self.head = Linear(in_channels, cfg.embed_dim, rng)

    def forward(self, images: Tensor) -> Tensor:
        return forward_features(self, images).embedding

    def embed_images(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Face embeddings of an N x C x H x W array in eval mode, without recording."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                chunks = [
                    self(Tensor(images[start:start + batch_size])).numpy()
                    for start in range(0, len(images), batch_size)
                ]
        finally:
            self.train(was_training)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.cfg.embed_dim))


def build_model(cfg: ModelConfig, rng_seed: Optional[int] = None) -> FacePyramidTransformer:
    """Initialize a model deterministically from a seed (cfg.seed by default)."""
    seed = cfg.seed if rng_seed is None else rng_seed
    grids = cfg.stage_grids()
    for index, (stage, grid) in enumerate(zip(cfg.stages, grids)):
        incoming = cfg.image_size if index == 0 else grids[index - 1]
        if index and incoming % stage.stride:
            logger.warning(f"stage {index + 1}: grid {incoming} not divisible by stride {stage.stride}, rounding up to {grid}")
    model = FacePyramidTransformer(cfg, np.random.default_rng(seed))
    logger.info(f"Built {len(cfg.stages)}-stage model with {model.num_parameters()} parameters, grids {grids}")
    return model


def forward_features(model: FacePyramidTransformer, images: Tensor) -> MultiScaleFeatures:
    """Run every stage and return the per-stage tokens and the face embedding.

    Raises:
        ShapeError: If the input size does not fit the first stage stride (checked before any compute)
    """
    cfg = model.cfg
    if images.ndim != 4:
        raise ShapeError(f"images must be B x C x H x W, got shape {images.shape}")
    _, channels, height, width = images.shape
    first = cfg.stages[0].stride
    if channels != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} input channels, got {channels}")
    if height % first or width % first:
        raise ShapeError(f"input {height}x{width} is not divisible by the first stride {first}")
    features: List[TokenSequence] = []
    x = images
    for index, stage in enumerate(model.stages):
        seq = stage(x, ceil_mode=index > 0)
        features.append(seq)
        x = seq.to_map()
    embedding = model.head(features[-1].tokens.mean(axis=1))
    return MultiScaleFeatures(features, embedding)


@dataclass
class StageAudit:
    grid: int
    tokens: int
    kv_tokens: int
    heads: int
    score_entries: int
    macs: int


@dataclass
class LightweightAudit:
    """Depthwise+pointwise filter weights read from a live module vs the closed form."""

    name: str
    kernel: int
    n_in: int
    n_out: int
    registry: int
    lightweight: int
    standard: int


@dataclass
class AuditReport:
    total: int
    breakdown: Dict[str, int]
    stages: List[StageAudit]
    lightweight: List[LightweightAudit]
    macs: int
    reference_params: int = PUBLISHED_PARAMS
    reference_label: str = PUBLISHED_LABEL

    def to_lines(self) -> List[str]:
        lines = [f"total_params={self.total}"]
        lines.append(f"reference_params={self.reference_params} ({self.reference_label})")
        lines.append("module                         params")
        for name, count in self.breakdown.items():
            lines.append(f"{name:<30} {count:>10}")
        for index, stage in enumerate(self.stages, start=1):
            lines.append(
                f"stage{index} grid={stage.grid}x{stage.grid} tokens={stage.tokens} kv={stage.kv_tokens} "
                f"heads={stage.heads} score_entries={stage.score_entries} macs={stage.macs}"
            )
        seen = set()
        for entry in self.lightweight:
            key = (entry.kernel, entry.n_in, entry.n_out)
            if key in seen:
                continue
            seen.add(key)
            lines.append(
                f"depthwise k={entry.kernel} n_in={entry.n_in} n_out={entry.n_out}: "
                f"{entry.lightweight} / {entry.standard} (registry {entry.registry})"
            )
        lines.append(f"macs_per_image={self.macs}")
        return lines


STAGE_CATEGORIES = ("embed", "pos", "norm", "attention", "ffn")


def _category(name: str) -> str:
    parts = name.split(".")
    if parts[0] != "stages":
        return parts[0]
    stage = f"stage{int(parts[1]) + 1}"
    if parts[2] == "blocks":
        kind = {"attn": "attention", "ffn": "ffn"}.get(parts[4], "norm")
        return f"{stage}.{kind}"
    return f"{stage}.{parts[2]}"


def _category_rank(key: str) -> Tuple[int, int, int, str]:
    """Stages first in stage order, each as embed, pos, norm, attention, ffn; other modules after."""
    if not key.startswith("stage"):
        return (1, 0, 0, "")
    stage, kind = key.split(".", 1)
    rank = STAGE_CATEGORIES.index(kind) if kind in STAGE_CATEGORIES else len(STAGE_CATEGORIES)
    return (0, int(stage[len("stage"):]), rank, kind)


def _stage_macs(cfg: ModelConfig, index: int, in_channels: int, grid: int) -> int:
    stage = cfg.stages[index]
    ipe = cfg.ipe_config(index)
    c, n = stage.channels, grid * grid
    attn = cfg.attn_config(index)
    kv = kv_length(grid, grid, attn)
    reduced = math.ceil(grid / stage.reduction) ** 2
    hidden = c * stage.expand
    stage_cffn = cfg.cffn_config(index)
    macs = n * c * in_channels * ipe.kernel * ipe.kernel
    per_layer = 2 * n * c * c + 2 * kv * c * c + 2 * n * kv * c
    if stage.reduction > 1:
        per_layer += reduced * stage.reduction * stage.reduction * c * c
    if cfg.conv_ffn:
        per_layer += 2 * n * c * hidden + n * hidden * stage_cffn.kernel * stage_cffn.kernel + n * hidden * hidden
    else:
        per_layer += 2 * n * c * hidden
    return macs + stage.layers * per_layer


def audit(model: FacePyramidTransformer) -> AuditReport:
    """Exact parameter totals from the registry plus attention memory and MAC estimates."""
    cfg = model.cfg
    counts: Dict[str, int] = {}
    for name, param in model.named_parameters():
        key = _category(name)
        counts[key] = counts.get(key, 0) + param.size
    breakdown = OrderedDict((key, counts[key]) for key in sorted(counts, key=_category_rank))
    stages = []
    total_macs = 0
    in_channels = cfg.in_channels
    for index, grid in enumerate(cfg.stage_grids()):
        attn = cfg.attn_config(index)
        tokens = grid * grid
        kv = kv_length(grid, grid, attn)
        macs = _stage_macs(cfg, index, in_channels, grid)
        stages.append(StageAudit(grid, tokens, kv, attn.heads, tokens * kv, macs))
        total_macs += macs
        in_channels = cfg.stages[index].channels
    total_macs += in_channels * cfg.embed_dim
    lightweight = []
    for name, module in _walk(model):
        if isinstance(module, ConvFeedForward):
            k, hidden = module.cfg.kernel, module.cfg.hidden
            light, standard = depthwise_param_count(k, hidden, hidden)
            lightweight.append(LightweightAudit(name, k, hidden, hidden, module.lightweight_weight_count(), light, standard))
    total = model.num_parameters()
    if total != sum(breakdown.values()):
        raise ShapeError("audit breakdown does not add up to the registry total")
    return AuditReport(total, dict(breakdown), stages, lightweight, total_macs)


def _walk(module: Module, prefix: str = "") -> List[Tuple[str, Module]]:
    found = [(prefix.rstrip("."), module)]
    for name, child in module.children():
        found.extend(_walk(child, f"{prefix}{name}."))
    return found


def variant_totals(cfg: ModelConfig) -> Dict[str, int]:
    """Parameter totals of the component ablation: baseline, +overlapping embedding, +conv FFN, both."""
    totals = {}
    for label, overlap, conv in (
        ("baseline", False, False),
        ("+ipe", True, False),
        ("+cffn", False, True),
        ("ipe+cffn", True, True),
    ):
        variant = ModelConfig.from_dict({**cfg.to_dict(), "overlap_embed": overlap, "conv_ffn": conv})
        totals[label] = FacePyramidTransformer(variant, np.random.default_rng(0)).num_parameters()
    return totals
