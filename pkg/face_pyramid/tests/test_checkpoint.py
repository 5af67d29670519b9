"""Tests for the binary checkpoint format."""

import io
import struct

import numpy as np
import pytest

from fpvt import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from fpvt.checkpoint import MAGIC, read_checkpoint, restore_rng, rng_state, write_checkpoint


def _round_trip(checkpoint):
    stream = io.BytesIO()
    write_checkpoint(stream, checkpoint)
    stream.seek(0)
    return read_checkpoint(stream)


def _sample(rng):
    return Checkpoint(
        "model.preset = toy\n",
        {
            "model.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "model.bias": rng.standard_normal(4),
            "head.scalar": np.array(np.pi),
        },
        {"step": 12, "note": "x"},
    )


class TestRoundTrip:
    """Test write/read round trips."""

    def test_bit_exact(self, rng):
        """Every tensor comes back bit for bit with its dtype."""
        original = _sample(rng)
        loaded = _round_trip(original)
        assert loaded.config_text == original.config_text
        assert loaded.meta == original.meta
        assert list(loaded.tensors) == list(original.tensors)
        for name, value in original.tensors.items():
            assert loaded.tensors[name].dtype == value.dtype
            assert loaded.tensors[name].shape == value.shape
            assert loaded.tensors[name].tobytes() == value.tobytes()

    def test_step_and_section(self, rng):
        """Metadata step and prefixed sections are exposed."""
        loaded = _round_trip(_sample(rng))
        assert loaded.step == 12
        assert sorted(loaded.section("model")) == ["bias", "weight"]

    def test_file_round_trip(self, tmp_path, rng):
        """Saving writes the file atomically and loads back."""
        path = save_checkpoint(tmp_path / "run" / "step_000012.ckpt", _sample(rng))
        assert path.read_bytes().startswith(MAGIC)
        assert not list(path.parent.glob("*.tmp"))
        assert load_checkpoint(path).step == 12

    def test_rng_state_resumes(self):
        """A restored generator continues the saved stream."""
        rng = np.random.default_rng(3)
        rng.random(5)
        checkpoint = _round_trip(Checkpoint("", {}, {"rng": rng_state(rng)}))
        restored = restore_rng(checkpoint.meta["rng"])
        np.testing.assert_array_equal(restored.random(4), rng.random(4))


class TestCorruption:
    """Test rejection of damaged checkpoints."""

    def test_bad_magic(self):
        """Foreign files are rejected."""
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            read_checkpoint(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_unknown_version(self):
        """Future versions are rejected."""
        with pytest.raises(CheckpointError, match="version 9"):
            read_checkpoint(io.BytesIO(MAGIC + struct.pack("<I", 9)))

    def test_truncated(self, rng):
        """A cut-off file names what was being read."""
        stream = io.BytesIO()
        write_checkpoint(stream, _sample(rng))
        data = stream.getvalue()
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(io.BytesIO(data[:-5]))

    def test_unknown_dtype_tag(self, rng):
        """Unknown dtype tags are rejected."""
        stream = io.BytesIO()
        write_checkpoint(stream, Checkpoint("", {"w": np.zeros(2)}, {}))
        data = bytearray(stream.getvalue())
        data[data.index(b"w") + 1] = ord("q")
        with pytest.raises(CheckpointError, match="unknown dtype tag"):
            read_checkpoint(io.BytesIO(bytes(data)))

    def test_unsupported_dtype(self):
        """Only float32 and float64 tensors are written."""
        with pytest.raises(CheckpointError, match="unsupported dtype"):
            write_checkpoint(io.BytesIO(), Checkpoint("", {"ids": np.arange(3)}, {}))

    def test_missing_file(self, tmp_path):
        """A missing file is a checkpoint error naming the path."""
        with pytest.raises(CheckpointError, match="absent.ckpt"):
            load_checkpoint(tmp_path / "absent.ckpt")
