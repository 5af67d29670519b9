"""pytest configuration and fixtures for fpvt_tensor tests."""

import numpy as np
import pytest

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
