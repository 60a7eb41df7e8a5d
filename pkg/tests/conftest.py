import numpy as np
import pytest

from wavefield import Grid1D


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20100101)


@pytest.fixture
def wide_grid() -> Grid1D:
    """[-20, 20] at dx = 0.05."""
    return Grid1D.spanning(-20.0, 20.0, 0.05)


@pytest.fixture
def oscillator_grid() -> Grid1D:
    """[-10, 10] at dx = 0.05."""
    return Grid1D.spanning(-10.0, 10.0, 0.05)
