"""pytest configuration and fixtures for fpvt tests."""

import numpy as np
import pytest

from fpvt import FdrConfig, SyntheticFaceSpec, build_model, toy_config
from fpvt.config import RunConfig, TrainConfig
from fpvt.diagnostics import tiny_config
from fpvt_tensor import Tape, default_dtype


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the test with float64 as the default tensor dtype."""
    with default_dtype(np.float64) as dtype:
        yield dtype


@pytest.fixture
def tape():
    """Fresh tape made active for the duration of the test."""
    with Tape() as active:
        yield active


@pytest.fixture
def toy_model(float64):
    """Two-stage toy model on 32 x 32 inputs."""
    return build_model(toy_config(), rng_seed=0)


@pytest.fixture
def tiny_model(float64):
    """Two-stage model on 16 x 16 inputs."""
    return build_model(tiny_config(), rng_seed=0)


@pytest.fixture
def small_run_config():
    """Fast float64 run: tiny model, 6 identities in 3 groups, 4-image batches."""
    return RunConfig(
        model=tiny_config(),
        fdr=FdrConfig(groups=3),
        data=SyntheticFaceSpec(n_identities=6, samples_per_identity=4, image_size=16, seed=3),
        train=TrainConfig(steps=3, batch_size=4, checkpoint_every=2, augment=False),
        name="small",
        precision="float64",
    )


@pytest.fixture
def config_file(tmp_path):
    """Write config text to a temp file and return its path."""

    def write(text, name="run.cfg"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return write
