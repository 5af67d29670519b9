"""Tests for the training loop, its log and resumption."""

from unittest.mock import patch

import numpy as np
import pytest

from fpvt import CheckpointError, NumericalError, RunConfig, Trainer, TrainingDivergedError, load_checkpoint, parse_config_text
from fpvt.config import OptimConfig
from fpvt.train import LOG_HEADER, LOG_NAME, checkpoint_name, model_from_checkpoint


def _with(config, **sections):
    data = config.to_dict()
    for section, values in sections.items():
        data[section].update(values)
    return RunConfig.from_dict(data)


def _log_lines(out_dir):
    return (out_dir / LOG_NAME).read_text().splitlines()


class TestStep:
    """Test single optimizer steps."""

    def test_record(self, small_run_config, tmp_path):
        """A step reports finite loss and accuracy within [0, 1]."""
        trainer = Trainer(small_run_config, tmp_path)
        record = trainer.step()
        assert record.step == 1
        assert np.isfinite(record.loss)
        assert 0.0 <= record.accuracy <= 1.0
        assert record.lr == pytest.approx(3e-4)
        assert trainer.step_index == 1

    def test_zero_lr_keeps_backbone(self, small_run_config, tmp_path):
        """With lr 0 the backbone parameters never move."""
        config = _with(small_run_config, optim=OptimConfig(lr=0.0).to_dict())
        trainer = Trainer(config, tmp_path)
        before = {name: param.data.copy() for name, param in trainer.model.named_parameters()}
        for _ in range(3):
            trainer.step()
        for name, param in trainer.model.named_parameters():
            np.testing.assert_array_equal(param.data, before[name])

    def test_fixed_batch_loss_decreases(self, small_run_config, tmp_path):
        """Repeated steps on one batch lower its loss."""
        trainer = Trainer(small_run_config, tmp_path)
        images, identities = trainer.sample_batch()
        losses = [trainer.step(images, identities).loss for _ in range(50)]
        assert losses[-1] < losses[0]

    def test_divergence_names_step(self, small_run_config, tmp_path):
        """A non-finite loss aborts with the step index."""
        trainer = Trainer(small_run_config, tmp_path)
        trainer.step()
        with patch("fpvt.train.margin_softmax_loss", side_effect=NumericalError("cross_entropy produced nan")):
            with pytest.raises(TrainingDivergedError, match="step 2") as excinfo:
                trainer.step()
        assert excinfo.value.step == 2
        assert trainer.step_index == 1

    def test_sample_batch(self, small_run_config, tmp_path):
        """Batches have the configured size, dtype and identities."""
        trainer = Trainer(small_run_config, tmp_path)
        images, identities = trainer.sample_batch()
        assert images.shape == (4, 3, 16, 16)
        assert images.dtype == np.float64
        assert set(identities.tolist()) <= set(range(6))

    def test_linear_head(self, small_run_config, tmp_path):
        """The n-way baseline head trains too."""
        config = _with(small_run_config, fdr={"head": "linear"})
        record = Trainer(config, tmp_path).step()
        assert np.isfinite(record.loss)


class TestRun:
    """Test the training loop, log and checkpoints."""

    def test_zero_steps(self, small_run_config, tmp_path):
        """Zero steps writes the initial checkpoint and an empty log."""
        records = Trainer(small_run_config, tmp_path).run(0)
        assert records == []
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [checkpoint_name(0)]
        assert _log_lines(tmp_path) == [LOG_HEADER]

    def test_log_and_checkpoints(self, small_run_config, tmp_path):
        """Each step is logged; checkpoints land at the start, every interval and the end."""
        records = Trainer(small_run_config, tmp_path).run()
        assert [r.step for r in records] == [1, 2, 3]
        lines = _log_lines(tmp_path)
        assert lines[0] == "step loss acc lr elapsed_ms"
        assert [line.split()[0] for line in lines[1:]] == ["1", "2", "3"]
        assert all(len(line.split()) == 5 for line in lines[1:])
        names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
        assert names == ["step_000000.ckpt", "step_000002.ckpt", "step_000003.ckpt"]

    def test_checkpoint_contents(self, small_run_config, tmp_path):
        """Checkpoints hold weights, optimizer moments, step and RNG."""
        trainer = Trainer(small_run_config, tmp_path)
        trainer.run(2)
        checkpoint = load_checkpoint(tmp_path / checkpoint_name(2))
        assert checkpoint.step == 2
        assert "head.anchors" in checkpoint.tensors
        assert any(name.startswith("model.stages.0.blocks.0.ffn.norm.running_mean") for name in checkpoint.tensors)
        assert any(name.startswith("optim.") for name in checkpoint.tensors)
        assert parse_config_text(checkpoint.config_text, environ={}) == small_run_config

    def test_same_seed_same_run(self, small_run_config, tmp_path):
        """Two float64 runs with one seed log the same values and write identical checkpoints."""
        Trainer(small_run_config, tmp_path / "a").run()
        Trainer(small_run_config, tmp_path / "b").run()

        def values(out_dir):
            return [line.split()[:4] for line in _log_lines(out_dir)[1:]]

        assert values(tmp_path / "a") == values(tmp_path / "b")
        final = checkpoint_name(3)
        assert (tmp_path / "a" / final).read_bytes() == (tmp_path / "b" / final).read_bytes()

    def test_log_appends_on_resume(self, small_run_config, tmp_path):
        """A resumed run appends to the existing log."""
        Trainer(small_run_config, tmp_path).run(2)
        trainer = Trainer.resume(tmp_path / checkpoint_name(2))
        trainer.run(1)
        lines = _log_lines(tmp_path)
        assert [line.split()[0] for line in lines[1:]] == ["1", "2", "3"]


class TestResume:
    """Test resumption from checkpoints."""

    def test_next_step_bit_exact(self, small_run_config, tmp_path):
        """Resuming reproduces the next step's loss exactly in float64."""
        original = Trainer(small_run_config, tmp_path / "a")
        original.run(2)
        expected = original.step()
        resumed = Trainer.resume(tmp_path / "a" / checkpoint_name(2), tmp_path / "b")
        assert resumed.step_index == 2
        actual = resumed.step()
        assert actual.loss == expected.loss
        assert actual.accuracy == expected.accuracy

    def test_resume_ignores_environment(self, small_run_config, tmp_path, monkeypatch):
        """The config echo is not re-seeded by the environment."""
        Trainer(small_run_config, tmp_path).run(0)
        monkeypatch.setenv("FPVT_SEED", "99")
        trainer = Trainer.resume(tmp_path / checkpoint_name(0))
        assert trainer.config.train.seed == 0

    def test_mismatched_checkpoint(self, small_run_config, tmp_path):
        """Weights from another architecture are rejected."""
        Trainer(small_run_config, tmp_path / "a").run(0)
        other = Trainer(RunConfig(), tmp_path / "b")
        with pytest.raises(CheckpointError):
            other.load(load_checkpoint(tmp_path / "a" / checkpoint_name(0)))

    def test_model_from_checkpoint(self, small_run_config, tmp_path):
        """A checkpoint rebuilds its config and model weights."""
        trainer = Trainer(small_run_config, tmp_path)
        trainer.run(1)
        config, model = model_from_checkpoint(tmp_path / checkpoint_name(1))
        assert config == small_run_config
        for (name, a), (_, b) in zip(trainer.model.named_parameters(), model.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)


@pytest.mark.slow
class TestToyAcceptance:
    """End-to-end training of the toy preset."""

    def test_reaches_group_accuracy(self, tmp_path):
        """Default toy training reaches 95% group accuracy within 500 steps."""
        config = parse_config_text("", environ={})
        trainer = Trainer(config, tmp_path)
        records = trainer.run()
        accuracies = np.array([r.accuracy for r in records])
        window = np.convolve(accuracies, np.ones(10) / 10, mode="valid")
        assert len(records) == 500
        assert window.max() >= 0.95
