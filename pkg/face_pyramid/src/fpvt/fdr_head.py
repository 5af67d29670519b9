"""Face dimensionality reduction head.

Training identities are split into m groups that share one column of the
d x m anchor matrix. For every group with members in the batch, the column
is replaced for that step by the alpha-weighted mean of the members'
features (the corresponding anchor); the remaining columns stay free anchors
and are learned like ordinary weights.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np

from fpvt_tensor import Tensor, as_tensor, clip, where
from fpvt_tensor import functional as F

from .exceptions import ConfigError, DataError, ShapeError, UnknownIdentityError
from .module import Module, trunc_normal

logger = logging.getLogger(__name__)

HEADS = ("fdr", "linear")
ALPHA_MODES = ("constant", "attention")
LOSS_KINDS = ("cosine", "angular")


@dataclass
class FdrConfig:
    """Anchor head sizing.

    ``head = "linear"`` swaps the grouped head for a plain n-way classifier.
    ``alpha_mode = "attention"`` weights group members by exp(cos(f, w_l) / temperature).
    """

    groups: int = 5
    seed: int = 0
    head: str = "fdr"
    alpha_mode: str = "constant"
    alpha: float = 1.0
    temperature: float = 1.0
    momentum: float = 0.9

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.groups < 1:
            raise ConfigError(f"fdr groups must be positive, got {self.groups}")
        if self.head not in HEADS:
            raise ConfigError(f"fdr head must be one of {HEADS}, got '{self.head}'")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}, got '{self.alpha_mode}'")
        if self.alpha <= 0.0 or self.temperature <= 0.0:
            raise ConfigError("alpha and temperature must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"write-back momentum must be in [0, 1), got {self.momentum}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FdrConfig":
        return cls(**data)


@dataclass
class LossConfig:
    kind: str = "cosine"
    margin: float = 0.5
    scale: float = 64.0

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got '{self.kind}'")
        if self.margin < 0.0 or self.scale <= 0.0:
            raise ConfigError(f"need margin >= 0 and scale > 0, got {self.margin}/{self.scale}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossConfig":
        return cls(**data)


def assign_groups(n: int, m: int, seed: int) -> np.ndarray:
    """Seeded uniform surjection of n identities onto m groups.

    Returns:
        Integer array of length n with every value of [0, m) present

    Raises:
        ConfigError: Unless 1 <= m < n
    """
    if m < 1 or m >= n:
        raise ConfigError(f"number of groups must satisfy 1 <= m < n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order[:m]] = np.arange(m)
    assignment[order[m:]] = rng.integers(0, m, size=n - m)
    return assignment


def corresponding_anchor(
    features: Tensor,
    batch_groups: Sequence[int],
    group: int,
    alphas: Optional[np.ndarray] = None,
) -> Optional[Tensor]:
    """Alpha-weighted mean of the in-batch features belonging to one group.

    Returns None when no sample of the batch belongs to the group; that
    column then stays a free anchor.
    """
    groups = np.asarray(batch_groups)
    if groups.shape != (features.shape[0],):
        raise ShapeError(f"{features.shape[0]} features but {groups.size} group labels")
    members = np.flatnonzero(groups == group)
    if members.size == 0:
        return None
    weights = np.ones(members.size) if alphas is None else np.asarray(alphas, dtype=np.float64)[members]
    if np.any(weights <= 0.0):
        raise DataError(f"alphas must be positive, got {weights.tolist()}")
    row = as_tensor((weights / weights.sum())[None, :], like=features)
    return F.matmul(row, features[members]).reshape(features.shape[1])


def membership_matrix(batch_groups: np.ndarray, m: int, alphas: Optional[np.ndarray] = None) -> np.ndarray:
    """K x m matrix whose column l holds the normalized alphas of group l's members (zeros if absent)."""
    k = batch_groups.size
    weights = np.ones(k) if alphas is None else np.asarray(alphas, dtype=np.float64)
    matrix = np.zeros((k, m))
    matrix[np.arange(k), batch_groups] = weights
    totals = matrix.sum(axis=0)
    present = totals > 0
    matrix[:, present] /= totals[present]
    return matrix


class FdrState(Module):
    """Anchor matrix (d x m), zero bias and the identity-to-group assignment."""

    def __init__(self, cfg: FdrConfig, n_identities: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.n_identities = n_identities
        self.dim = dim
        self.assignment = assign_groups(n_identities, cfg.groups, cfg.seed)
        self.anchors = trunc_normal(rng, (dim, cfg.groups))
        self.register_buffer("bias", np.zeros(cfg.groups))

    @property
    def num_classes(self) -> int:
        return self.cfg.groups

    def groups_of(self, identities: Sequence[int]) -> np.ndarray:
        ids = np.asarray(identities, dtype=np.int64)
        unknown = ids[(ids < 0) | (ids >= self.n_identities)]
        if unknown.size:
            raise UnknownIdentityError(f"identities {sorted(set(unknown.tolist()))} have no group assignment")
        return self.assignment[ids]

    def targets(self, identities: Sequence[int]) -> np.ndarray:
        return self.groups_of(identities)

    def alphas(self, features: Tensor, batch_groups: np.ndarray) -> Optional[np.ndarray]:
        """Per-sample weights toward their own group column; None means constant."""
        if self.cfg.alpha_mode == "constant":
            return None
        f = features.data / (np.linalg.norm(features.data, axis=1, keepdims=True) + 1e-12)
        w = self.anchors.data / (np.linalg.norm(self.anchors.data, axis=0, keepdims=True) + 1e-12)
        cosines = np.einsum("kd,dk->k", f, w[:, batch_groups])
        return np.exp(cosines / self.cfg.temperature)

    def effective_anchors(self, features: Tensor, identities: Optional[Sequence[int]]) -> Tensor:
        """Anchor matrix used this step: corresponding anchors where the batch has members."""
        if identities is None:
            return self.anchors
        groups = self.groups_of(identities)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ShapeError(f"features must be B x {self.dim}, got shape {features.shape}")
        if groups.shape != (features.shape[0],):
            raise ShapeError(f"{features.shape[0]} features but {groups.size} identities")
        membership = membership_matrix(groups, self.cfg.groups, self.alphas(features, groups))
        free = as_tensor((membership.sum(axis=0) == 0).astype(np.float64), like=features)
        corresponding = F.matmul(features.T, as_tensor(membership, like=features))
        return self.anchors * free + corresponding

    def cosines(self, features: Tensor, identities: Optional[Sequence[int]]) -> Tensor:
        return fdr_cosine(features, self, identities)

    def after_step(self, features: np.ndarray, identities: Sequence[int]) -> None:
        writeback(self, features, identities)


def fdr_forward(features: Tensor, state: FdrState, batch_identities: Optional[Sequence[int]]) -> Tensor:
    """Logits features @ w_eff + b, shape B x m.

    Raises:
        UnknownIdentityError: If an identity has no group
    """
    w_eff = state.effective_anchors(features, batch_identities)
    return F.matmul(features, w_eff) + as_tensor(state.bias, like=features)


def fdr_cosine(features: Tensor, state: FdrState, batch_identities: Optional[Sequence[int]]) -> Tensor:
    """Cosine similarity between each feature and each effective anchor column."""
    w_eff = state.effective_anchors(features, batch_identities)
    return F.matmul(F.normalize(features, axis=1), F.normalize(w_eff, axis=0))


def writeback(state: FdrState, features: np.ndarray, identities: Sequence[int]) -> None:
    """Move stored columns of represented groups toward this batch's anchors (in place)."""
    groups = state.groups_of(identities)
    batch = np.asarray(features, dtype=np.float64)
    membership = membership_matrix(groups, state.cfg.groups, state.alphas(Tensor(batch), groups))
    present = membership.sum(axis=0) > 0
    anchors = batch.T @ membership
    momentum = state.cfg.momentum
    column = state.anchors.data
    column[:, present] = momentum * column[:, present] + (1.0 - momentum) * anchors[:, present]
    logger.debug(f"wrote back {int(present.sum())} of {state.cfg.groups} anchor columns")


def parameter_saving(n: int, m: int, d: int) -> int:
    """Weights saved against an n-way classifier: (n - m) * d."""
    return (n - m) * d


def margin_softmax_loss(
    cosines: Tensor,
    targets: Sequence[int],
    margin: float = 0.5,
    scale: float = 64.0,
    kind: str = "cosine",
) -> Tensor:
    """Cross-entropy over scaled cosines with a margin on the target column.

    ``cosine`` subtracts the margin from the target cosine. ``angular`` adds it
    to the angle, cos(theta + m), falling back to cos - m * sin(pi - m) once
    theta + m passes pi.

    Raises:
        DataError: If a target is out of range
    """
    if cosines.ndim != 2:
        raise ShapeError(f"cosines must be B x M, got shape {cosines.shape}")
    batch, classes = cosines.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise DataError(f"targets must lie in [0, {classes}), got {targets.tolist()}")
    onehot = np.zeros((batch, classes))
    onehot[np.arange(batch), targets] = 1.0
    if kind == "cosine":
        adjusted = cosines - as_tensor(margin * onehot, like=cosines)
    elif kind == "angular":
        cos_m, sin_m = math.cos(margin), math.sin(margin)
        th = math.cos(math.pi - margin)
        mm = math.sin(math.pi - margin) * margin
        sine = clip(1.0 - cosines * cosines, 1e-12, 1.0).sqrt()
        phi = cosines * cos_m - sine * sin_m
        phi = where(cosines.data > th, phi, cosines - mm)
        adjusted = where(onehot > 0, phi, cosines)
    else:
        raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got '{kind}'")
    return F.cross_entropy(adjusted * scale, targets)


class LinearHead(Module):
    """Plain n-way cosine classifier over identities (ablation baseline)."""

    def __init__(self, n_identities: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.n_identities = n_identities
        self.weight = trunc_normal(rng, (dim, n_identities))

    @property
    def num_classes(self) -> int:
        return self.n_identities

    def targets(self, identities: Sequence[int]) -> np.ndarray:
        ids = np.asarray(identities, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_identities):
            raise UnknownIdentityError(f"identities outside [0, {self.n_identities})")
        return ids

    def cosines(self, features: Tensor, identities: Optional[Sequence[int]]) -> Tensor:
        return F.matmul(F.normalize(features, axis=1), F.normalize(self.weight, axis=0))

    def after_step(self, features: np.ndarray, identities: Sequence[int]) -> None:
        pass


def build_head(cfg: FdrConfig, n_identities: int, dim: int) -> Module:
    """FDR or linear head, initialized from cfg.seed."""
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.head == "linear":
        return LinearHead(n_identities, dim, rng)
    head = FdrState(cfg, n_identities, dim, rng)
    logger.info(
        f"FDR head: {n_identities} identities in {cfg.groups} groups, "
        f"saves {parameter_saving(n_identities, cfg.groups, dim)} weights over an n-way classifier"
    )
    return head
