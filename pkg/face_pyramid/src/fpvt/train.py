"""Training loop over the synthetic identity dataset."""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from fpvt_tensor import NumericalError, OptimizerState, Tape, Tensor, backward, default_dtype

from .checkpoint import Checkpoint, load_checkpoint, restore_rng, rng_state, save_checkpoint
from .config import RunConfig, parse_config_text, to_text
from .data import Dataset, augment, generate_dataset
from .exceptions import CheckpointError, DataError, ShapeError, TrainingDivergedError
from .fdr_head import build_head, margin_softmax_loss
from .module import Module
from .pyramid import FacePyramidTransformer, build_model

logger = logging.getLogger(__name__)

LOG_NAME = "train.log"
LOG_HEADER = "step loss acc lr elapsed_ms"


@dataclass
class StepRecord:
    step: int
    loss: float
    accuracy: float
    lr: float
    elapsed_ms: float

    def to_line(self) -> str:
        return f"{self.step} {self.loss:.6f} {self.accuracy:.4f} {self.lr:.6g} {self.elapsed_ms:.1f}"


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.ckpt"


class Trainer:
    """Owns the model, head, optimizer and sampling RNG of one run.

    Every array is created under the run's precision, so a float64 run with
    a fixed seed reproduces its log (bar timings) and checkpoints exactly.
    """

    def __init__(self, config: RunConfig, out_dir: Union[str, Path], dataset: Optional[Dataset] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.dtype = np.dtype(config.precision)
        self.dataset = dataset if dataset is not None else generate_dataset(config.data)
        with default_dtype(self.dtype):
            self.model: FacePyramidTransformer = build_model(config.model)
            self.head: Module = build_head(config.fdr, config.data.n_identities, config.model.embed_dim)
            self.optimizer = config.optim.build(self.named_parameters())
        self.rng = np.random.default_rng([config.train.seed, 2])
        self.step_index = 0
        self.history: List[StepRecord] = []

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {f"model.{name}": param for name, param in self.model.named_parameters()}
        params.update({f"head.{name}": param for name, param in self.head.named_parameters()})
        return params

    def sample_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        count = len(self.dataset)
        size = self.config.train.batch_size
        index = self.rng.choice(count, size=size, replace=size > count)
        images = self.dataset.images[index]
        if self.config.train.augment:
            images = np.stack([augment(image, self.rng, pad=self.config.train.augment_pad) for image in images])
        return images.astype(self.dtype), self.dataset.identities[index]

    def step(self, images: Optional[np.ndarray] = None, identities: Optional[np.ndarray] = None) -> StepRecord:
        """One optimizer step on a sampled batch (or the given one).

        Raises:
            TrainingDivergedError: If the loss or a gradient stops being finite
        """
        if images is None or identities is None:
            images, identities = self.sample_batch()
        step = self.step_index + 1
        started = time.perf_counter()
        self.model.train()
        self.head.train()
        self.optimizer.zero_grad()
        loss_cfg = self.config.loss
        try:
            with default_dtype(self.dtype), Tape():
                embedding = self.model(Tensor(images))
                cosines = self.head.cosines(embedding, identities)
                targets = self.head.targets(identities)
                loss = margin_softmax_loss(cosines, targets, loss_cfg.margin, loss_cfg.scale, loss_cfg.kind)
                backward(loss)
        except NumericalError as e:
            raise TrainingDivergedError(step, str(e)) from e
        self.optimizer.step()
        self.head.after_step(embedding.data, identities)
        self.step_index = step
        accuracy = float((cosines.data.argmax(axis=1) == targets).mean())
        record = StepRecord(step, loss.item(), accuracy, self.optimizer.lr, (time.perf_counter() - started) * 1000.0)
        if not np.isfinite(record.loss):
            raise TrainingDivergedError(step, "loss is not finite")
        self.history.append(record)
        return record

    def run(self, steps: Optional[int] = None) -> List[StepRecord]:
        """Train, appending to train.log and checkpointing at the start, periodically and at the end."""
        total = self.config.train.steps if steps is None else steps
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / LOG_NAME
        if not log_path.exists():
            log_path.write_text(LOG_HEADER + "\n", encoding="utf-8")
        if self.step_index == 0:
            self.save()
        records = []
        target = self.step_index + total
        with open(log_path, "a", encoding="utf-8") as log:
            while self.step_index < target:
                record = self.step()
                records.append(record)
                if record.step % self.config.train.log_every == 0:
                    log.write(record.to_line() + "\n")
                    log.flush()
                    logger.info(f"step {record.step}: loss {record.loss:.4f} acc {record.accuracy:.3f}")
                if record.step % self.config.train.checkpoint_every == 0 or record.step == target:
                    self.save()
        return records

    def checkpoint(self) -> Checkpoint:
        tensors = {f"model.{name}": value for name, value in self.model.state_dict().items()}
        tensors.update({f"head.{name}": value for name, value in self.head.state_dict().items()})
        state = self.optimizer.state
        for slot, table in state.buffers.items():
            tensors.update({f"optim.{slot}.{name}": value.copy() for name, value in table.items()})
        meta = {"step": self.step_index, "rng": rng_state(self.rng), "optimizer": state.to_dict()}
        return Checkpoint(to_text(self.config), tensors, meta)

    def save(self) -> Path:
        return save_checkpoint(self.out_dir / checkpoint_name(self.step_index), self.checkpoint())

    def load(self, checkpoint: Checkpoint) -> None:
        """Restore weights, optimizer moments, step and sampling RNG."""
        self.model.load_state_dict(checkpoint.section("model"))
        self.head.load_state_dict(checkpoint.section("head"))
        buffers: Dict[str, Dict[str, np.ndarray]] = {}
        for name, value in checkpoint.section("optim").items():
            slot, param = name.split(".", 1)
            buffers.setdefault(slot, {})[param] = value
        try:
            self.optimizer.load_state_dict(OptimizerState.from_dict(checkpoint.meta["optimizer"], buffers))
        except (KeyError, ValueError, DataError, ShapeError) as e:
            raise CheckpointError(f"checkpoint optimizer state is unusable: {e}") from e
        self.rng = restore_rng(checkpoint.meta.get("rng"))
        self.step_index = checkpoint.step

    @classmethod
    def resume(cls, path: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint's config echo and state."""
        checkpoint = load_checkpoint(path)
        config = parse_config_text(checkpoint.config_text, environ={})
        trainer = cls(config, out_dir if out_dir is not None else Path(path).parent)
        trainer.load(checkpoint)
        logger.info(f"Resumed from {path} at step {trainer.step_index}")
        return trainer


def model_from_checkpoint(path: Union[str, Path]) -> Tuple[RunConfig, FacePyramidTransformer]:
    """(RunConfig, model) rebuilt from a checkpoint's config echo, weights loaded."""
    checkpoint = load_checkpoint(path)
    config = parse_config_text(checkpoint.config_text, environ={})
    with default_dtype(config.precision):
        model = build_model(config.model)
    model.load_state_dict(checkpoint.section("model"))
    return config, model
