"""Synthetic identity dataset, augmentation and verification pair files.

Each identity is a seeded mixture of oriented Gaussian blobs; each sample
of an identity rotates and shifts that pattern within the pose jitter and
adds pixel noise. Images are planar float arrays (C x H x W) in [0, 1].
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from fpvt_tensor.functional import resize_bilinear

from .exceptions import ConfigError, PairsFormatError

logger = logging.getLogger(__name__)

BLOBS_PER_IDENTITY = 6


@dataclass
class SyntheticFaceSpec:
    n_identities: int = 10
    samples_per_identity: int = 20
    image_size: int = 32
    channels: int = 3
    noise_std: float = 0.05
    pose_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.n_identities < 1 or self.samples_per_identity < 1:
            raise ConfigError("dataset needs at least one identity and one sample per identity")
        if self.image_size < 4 or self.channels < 1:
            raise ConfigError(f"image size must be >= 4 with >= 1 channel, got {self.image_size}/{self.channels}")
        if self.noise_std < 0.0 or not 0.0 <= self.pose_jitter <= 1.0:
            raise ConfigError("noise_std must be >= 0 and pose_jitter in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticFaceSpec":
        return cls(**data)


@dataclass
class Dataset:
    images: np.ndarray
    identities: np.ndarray
    samples: np.ndarray

    def __len__(self) -> int:
        return len(self.identities)

    @property
    def n_identities(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0


def _identity_blobs(spec: SyntheticFaceSpec, identity: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([spec.seed, identity])
    count = BLOBS_PER_IDENTITY
    return {
        "center": rng.uniform(-0.6, 0.6, size=(count, 2)),
        "sigma": rng.uniform(0.08, 0.3, size=(count, 2)),
        "angle": rng.uniform(0.0, np.pi, size=count),
        "color": rng.uniform(0.2, 1.0, size=(count, spec.channels)),
    }


def generate_image(spec: SyntheticFaceSpec, identity: int, sample: int) -> np.ndarray:
    """Image of one (identity, sample); a pure function of its arguments.

    Returns:
        C x H x W array clipped to [0, 1]
    """
    blobs = _identity_blobs(spec, identity)
    rng = np.random.default_rng([spec.seed, identity, sample, 1])
    rotation = rng.uniform(-1.0, 1.0) * spec.pose_jitter * np.pi / 2
    shift = rng.uniform(-1.0, 1.0, size=2) * spec.pose_jitter
    axis = np.linspace(-1.0, 1.0, spec.image_size)
    ys, xs = np.meshgrid(axis, axis, indexing="ij")
    cos_r, sin_r = np.cos(rotation), np.sin(rotation)
    # pose: inverse-rotate and shift the sampling grid
    px = cos_r * xs + sin_r * ys - shift[0]
    py = -sin_r * xs + cos_r * ys - shift[1]
    image = np.zeros((spec.channels, spec.image_size, spec.image_size))
    for center, sigma, angle, color in zip(blobs["center"], blobs["sigma"], blobs["angle"], blobs["color"]):
        dx, dy = px - center[0], py - center[1]
        u = np.cos(angle) * dx + np.sin(angle) * dy
        v = -np.sin(angle) * dx + np.cos(angle) * dy
        blob = np.exp(-0.5 * ((u / sigma[0]) ** 2 + (v / sigma[1]) ** 2))
        image += color[:, None, None] * blob[None]
    if spec.noise_std > 0.0:
        image += rng.normal(0.0, spec.noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_dataset(spec: SyntheticFaceSpec) -> Dataset:
    """Every (identity, sample) image, identity-major."""
    identities = np.repeat(np.arange(spec.n_identities), spec.samples_per_identity)
    samples = np.tile(np.arange(spec.samples_per_identity), spec.n_identities)
    images = np.stack([generate_image(spec, int(i), int(j)) for i, j in zip(identities, samples)])
    logger.info(f"Generated {len(images)} synthetic images of {spec.n_identities} identities")
    return Dataset(images, identities, samples)


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: Optional[bool] = None) -> np.ndarray:
    """Resize to size+pad, crop a random size x size window, flip with probability 0.5.

    Args:
        image: C x H x W array
        rng: Source of the crop offset and flip draw
        pad: Extra pixels added by the resize
        flip: Force (True) or suppress (False) the flip instead of drawing it
    """
    _, height, width = image.shape
    if pad > 0:
        enlarged = resize_bilinear(image, height + pad, width + pad)
        top = int(rng.integers(0, pad + 1))
        left = int(rng.integers(0, pad + 1))
        image = enlarged[:, top:top + height, left:left + width]
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    return horizontal_flip(image) if do_flip else image.copy()


@dataclass
class PairRecord:
    identity_a: int
    sample_a: int
    identity_b: int
    sample_b: int
    same: bool


def make_pairs(spec: SyntheticFaceSpec, n_pairs: int, seed: int = 0) -> List[PairRecord]:
    """Balanced same/different pairs drawn from a dataset spec."""
    if spec.n_identities < 2:
        raise ConfigError("different-identity pairs need at least two identities")
    if spec.samples_per_identity < 2:
        raise ConfigError("same-identity pairs need at least two samples per identity")
    rng = np.random.default_rng(seed)
    pairs = []
    for index in range(n_pairs):
        a = int(rng.integers(spec.n_identities))
        sa, sb = (int(s) for s in rng.choice(spec.samples_per_identity, size=2, replace=False))
        if index % 2 == 0:
            pairs.append(PairRecord(a, sa, a, sb, True))
        else:
            b = int((a + rng.integers(1, spec.n_identities)) % spec.n_identities)
            pairs.append(PairRecord(a, sa, b, sb, False))
    return pairs


def write_pairs(path: Union[str, Path], pairs: List[PairRecord]) -> None:
    lines = ["# idA sampleA idB sampleB label"]
    lines += [f"{p.identity_a} {p.sample_a} {p.identity_b} {p.sample_b} {int(p.same)}" for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_pairs(text: str) -> List[PairRecord]:
    """Parse "idA sampleA idB sampleB label" records; blank lines and # comments are skipped.

    Raises:
        PairsFormatError: On a malformed record, carrying its line number
    """
    pairs = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise PairsFormatError(f"expected 5 fields, got {len(fields)}", line=number)
        try:
            ia, sa, ib, sb, label = (int(field) for field in fields)
        except ValueError as e:
            raise PairsFormatError(f"non-integer field: {e}", line=number) from e
        if label not in (0, 1) or min(ia, sa, ib, sb) < 0:
            raise PairsFormatError(f"label must be 0 or 1 and indices non-negative: '{line}'", line=number)
        pairs.append(PairRecord(ia, sa, ib, sb, bool(label)))
    return pairs


def read_pairs(path: Union[str, Path]) -> List[PairRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise PairsFormatError(f"cannot read pairs file {path}: {e}") from e
    return parse_pairs(text)


def pair_images(spec: SyntheticFaceSpec, pairs: List[PairRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Regenerate both images of every pair; returns (images_a, images_b, labels)."""
    for pair in pairs:
        if max(pair.identity_a, pair.identity_b) >= spec.n_identities:
            raise PairsFormatError(f"pair refers to identity beyond {spec.n_identities - 1}")
    images_a = np.stack([generate_image(spec, p.identity_a, p.sample_a) for p in pairs])
    images_b = np.stack([generate_image(spec, p.identity_b, p.sample_b) for p in pairs])
    return images_a, images_b, np.array([p.same for p in pairs])


def nearest_centroid_accuracy(dataset: Dataset) -> float:
    """Train accuracy of a nearest-centroid pixel classifier."""
    flat = dataset.images.reshape(len(dataset), -1)
    ids = np.unique(dataset.identities)
    centroids = np.stack([flat[dataset.identities == i].mean(axis=0) for i in ids])
    distances = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float((ids[distances.argmin(axis=1)] == dataset.identities).mean())
