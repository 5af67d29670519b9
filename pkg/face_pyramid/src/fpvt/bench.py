"""Per-image inference latency."""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from fpvt_tensor import Tensor, no_grad

from .exceptions import DataError
from .pyramid import FacePyramidTransformer

logger = logging.getLogger(__name__)


@dataclass
class BenchReport:
    n_images: int
    warmup: int
    median_ms: float
    p95_ms: float
    mean_ms: float
    params: int
    timings_ms: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_lines(self) -> List[str]:
        return [
            f"images={self.n_images} warmup={self.warmup} params={self.params}",
            f"p95_ms={self.p95_ms:.3f}",
            f"mean_ms={self.mean_ms:.3f}",
            f"median_ms={self.median_ms:.3f}",
        ]


def bench_inference(
    model: FacePyramidTransformer,
    n_images: int,
    warmup: int = 2,
    seed: int = 0,
) -> BenchReport:
    """Time single-image forwards in eval mode, discarding ``warmup`` runs.

    Raises:
        DataError: If n_images < 1 or warmup < 0
    """
    if n_images < 1:
        raise DataError(f"bench needs at least one image, got {n_images}")
    if warmup < 0:
        raise DataError(f"warmup must be non-negative, got {warmup}")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    images = rng.random((warmup + n_images, cfg.in_channels, cfg.image_size, cfg.image_size))
    model.eval()
    timings = []
    with no_grad():
        for index, image in enumerate(images):
            started = time.perf_counter()
            model(Tensor(image[None]))
            elapsed = (time.perf_counter() - started) * 1000.0
            if index >= warmup:
                timings.append(elapsed)
    values = np.array(timings)
    report = BenchReport(
        n_images=n_images,
        warmup=warmup,
        median_ms=float(np.median(values)),
        p95_ms=float(np.percentile(values, 95)),
        mean_ms=float(values.mean()),
        params=model.num_parameters(),
        timings_ms=timings,
    )
    logger.info(f"bench: {n_images} images, median {report.median_ms:.3f} ms, p95 {report.p95_ms:.3f} ms")
    return report


def relative_speed(baseline: BenchReport, other: BenchReport) -> float:
    """How many times faster ``other`` is than ``baseline`` (median ratio)."""
    if other.median_ms <= 0.0:
        raise DataError("cannot compare against a zero median latency")
    return baseline.median_ms / other.median_ms


def compare_lines(baseline: BenchReport, other: BenchReport, other_label: Optional[str] = None) -> List[str]:
    label = other_label or "compare"
    return [
        f"{label}_median_ms={other.median_ms:.3f}",
        f"{label}_params={other.params}",
        f"relative_speed={relative_speed(baseline, other):.3f}",
    ]
