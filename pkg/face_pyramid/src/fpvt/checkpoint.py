"""Binary checkpoint format.

Layout (all integers little-endian u32):

    b"FPVT" | version | len + config text | len + JSON metadata |
    tensor count | records

Each record is ``len + name | dtype tag (b"f" float32, b"d" float64) |
rank | dims... | raw little-endian values``. Values are written from the
arrays' own buffers, so a load reproduces every tensor bit for bit.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Union

import numpy as np

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"FPVT"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): b"f", np.dtype("<f8"): b"d"}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    """Config echo, named tensors and JSON-serializable metadata (step, RNG and optimizer scalars)."""

    config_text: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        start = len(prefix) + 1
        return {name[start:]: value for name, value in self.tensors.items() if name.startswith(prefix + ".")}


def _write_u32(stream: BinaryIO, value: int) -> None:
    stream.write(struct.pack("<I", value))


def _write_blob(stream: BinaryIO, blob: bytes) -> None:
    _write_u32(stream, len(blob))
    stream.write(blob)


def _read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_u32(stream: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read_exact(stream, 4, what))[0]


def _read_blob(stream: BinaryIO, what: str) -> bytes:
    return _read_exact(stream, _read_u32(stream, what), what)


def write_checkpoint(stream: BinaryIO, checkpoint: Checkpoint) -> None:
    stream.write(MAGIC)
    _write_u32(stream, checkpoint.version)
    _write_blob(stream, checkpoint.config_text.encode("utf-8"))
    _write_blob(stream, json.dumps(checkpoint.meta, sort_keys=True).encode("utf-8"))
    _write_u32(stream, len(checkpoint.tensors))
    for name, value in checkpoint.tensors.items():
        array = np.asarray(value)
        dtype = array.dtype.newbyteorder("<")
        tag = _DTYPE_TAGS.get(dtype)
        if tag is None:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {array.dtype}")
        _write_blob(stream, name.encode("utf-8"))
        stream.write(tag)
        _write_u32(stream, array.ndim)
        for dim in array.shape:
            _write_u32(stream, dim)
        stream.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_checkpoint(stream: BinaryIO) -> Checkpoint:
    """Parse a checkpoint stream.

    Raises:
        CheckpointError: On bad magic, unknown version, unknown dtype tag or truncation
    """
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    version = _read_u32(stream, "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config_text = _read_blob(stream, "config").decode("utf-8")
        meta = json.loads(_read_blob(stream, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(_read_u32(stream, "tensor count")):
        name = _read_blob(stream, "tensor name").decode("utf-8")
        tag = _read_exact(stream, 1, f"dtype of '{name}'")
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise CheckpointError(f"tensor '{name}' has unknown dtype tag {tag!r}")
        shape = tuple(_read_u32(stream, f"shape of '{name}'") for _ in range(_read_u32(stream, f"rank of '{name}'")))
        count = int(np.prod(shape, dtype=np.int64))
        raw = _read_exact(stream, count * dtype.itemsize, f"values of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Checkpoint(config_text, tensors, meta, version)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as stream:
            write_checkpoint(stream, checkpoint)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Wrote checkpoint {path} (step {checkpoint.step}, {len(checkpoint.tensors)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        with open(path, "rb") as stream:
            checkpoint = read_checkpoint(stream)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    logger.debug(f"Loaded checkpoint {path} (step {checkpoint.step})")
    return checkpoint


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return dict(rng.bit_generator.state)


def restore_rng(state: Optional[Dict[str, Any]], seed: int = 0) -> np.random.Generator:
    """Generator continuing exactly where the saved one stopped."""
    rng = np.random.default_rng(seed)
    if state:
        try:
            rng.bit_generator.state = state
        except (TypeError, ValueError, KeyError) as e:
            raise CheckpointError(f"cannot restore RNG state: {e}") from e
    return rng
