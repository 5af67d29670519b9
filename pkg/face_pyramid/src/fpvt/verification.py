"""K-fold face verification with cosine-similarity thresholds.

For each fold the threshold is chosen on the other k - 1 folds from the
grid -1, -0.999, ..., 1 (the lowest threshold wins ties) and the held-out
fold is scored with it. A pair is predicted "same" iff its similarity is
strictly above the threshold.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataError, ProtocolError, ShapeError

logger = logging.getLogger(__name__)

THRESHOLDS = np.linspace(-1.0, 1.0, 2001)


@dataclass
class VerificationPair:
    embedding_a: np.ndarray
    embedding_b: np.ndarray
    same: bool

    def __post_init__(self) -> None:
        self.embedding_a = np.asarray(self.embedding_a, dtype=np.float64)
        self.embedding_b = np.asarray(self.embedding_b, dtype=np.float64)
        if self.embedding_a.shape != self.embedding_b.shape or self.embedding_a.ndim != 1:
            raise ShapeError(f"pair embeddings must be equal-length vectors, got {self.embedding_a.shape} and {self.embedding_b.shape}")
        if not (np.all(np.isfinite(self.embedding_a)) and np.all(np.isfinite(self.embedding_b))):
            raise DataError("pair embeddings must be finite")


@dataclass
class FoldResult:
    fold: int
    threshold: float
    accuracy: float
    train_accuracy: float
    pairs: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalReport:
    """Per-fold results, their mean and std, plus optional model figures."""

    folds: List[FoldResult]
    mean_accuracy: float
    std_accuracy: float
    params: Optional[int] = None
    macs: Optional[int] = None
    timing: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["folds"] = [fold.to_dict() for fold in self.folds]
        return data

    def to_lines(self) -> List[str]:
        lines = [
            f"fold {f.fold}: accuracy={f.accuracy:.3f} threshold={f.threshold:.3f} pairs={f.pairs}"
            for f in self.folds
        ]
        if self.params is not None:
            lines.append(f"params={self.params}")
        lines.append(f"mean_accuracy={self.mean_accuracy:.3f} std={self.std_accuracy:.3f}")
        return lines


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity clipped to [-1, 1]."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    sims = np.einsum("ij,ij->i", a, b) / np.maximum(norms, 1e-12)
    return np.clip(sims, -1.0, 1.0)


def best_threshold(similarities: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """(threshold, accuracy) maximizing accuracy; argmax picks the lowest on ties."""
    predictions = similarities[None, :] > THRESHOLDS[:, None]
    accuracies = (predictions == labels[None, :]).mean(axis=1)
    best = int(np.argmax(accuracies))
    return float(THRESHOLDS[best]), float(accuracies[best])


def kfold_from_similarities(similarities: Sequence[float], labels: Sequence[bool], k: int = 10) -> EvalReport:
    """Run the k-fold protocol over precomputed similarities.

    Raises:
        ProtocolError: If k < 2, there are fewer pairs than folds, or a training split has one label
    """
    sims = np.asarray(similarities, dtype=np.float64)
    labels_arr = np.asarray(labels, dtype=bool)
    if sims.shape != labels_arr.shape:
        raise ShapeError(f"{sims.size} similarities but {labels_arr.size} labels")
    if k < 2:
        raise ProtocolError(f"need at least 2 folds, got {k}")
    if sims.size < k:
        raise ProtocolError(f"{sims.size} pairs cannot be split into {k} folds")
    folds = np.array_split(np.arange(sims.size), k)
    results = []
    for index, test in enumerate(folds):
        train = np.setdiff1d(np.arange(sims.size), test)
        if labels_arr[train].all() or not labels_arr[train].any():
            raise ProtocolError(f"training split of fold {index + 1} contains a single label")
        threshold, train_accuracy = best_threshold(sims[train], labels_arr[train])
        accuracy = float(((sims[test] > threshold) == labels_arr[test]).mean())
        results.append(FoldResult(index + 1, threshold, accuracy, train_accuracy, int(test.size)))
        logger.debug(f"fold {index + 1}: threshold {threshold:.3f} accuracy {accuracy:.3f}")
    accuracies = np.array([r.accuracy for r in results])
    report = EvalReport(results, float(accuracies.mean()), float(accuracies.std()))
    logger.info(f"{k}-fold verification: {report.mean_accuracy:.3f} +- {report.std_accuracy:.3f}")
    return report


def kfold_verification(pairs: Sequence[VerificationPair], k: int = 10) -> EvalReport:
    if not pairs:
        raise ProtocolError("no verification pairs")
    a = np.stack([p.embedding_a for p in pairs])
    b = np.stack([p.embedding_b for p in pairs])
    return kfold_from_similarities(cosine_similarity(a, b), [p.same for p in pairs], k)
