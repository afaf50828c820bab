import numpy as np
import pytest
from hypothesis import settings

from ddswarm.core import Grid1D, PhysicalConstants, PotentialField, WaveField

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def grid():
    return Grid1D(0.0, 1.0, 64)


@pytest.fixture
def constants():
    return PhysicalConstants()


@pytest.fixture
def zero_v(grid):
    return PotentialField.zero(grid)


def smooth_random_state(grid, rng, n_modes=4):
    """Random smooth state sqrt(rho) exp(i phi): a Gaussian envelope with a gentle positive
    modulation and a phase built from a linear term plus a few low Fourier modes."""
    x = (grid.centers - grid.x_min) / grid.length
    env = np.exp(-((x - rng.uniform(0.4, 0.6)) ** 2) / (2 * 0.15**2))
    b = rng.normal(size=n_modes)
    k = 2 * np.pi * rng.integers(1, 4, n_modes)
    mod = 1 + 0.4 * np.sum(b[:, None] * np.cos(k[:, None] * x + rng.uniform(0, 6.3, (n_modes, 1))),
                           axis=0) / np.abs(b).sum()
    c = 0.3 * rng.normal(size=n_modes)
    phase = rng.uniform(-8, 8) * x + np.sum(
        c[:, None] * np.sin(k[:, None] * x + rng.uniform(0, 6.3, (n_modes, 1))), axis=0)
    return WaveField.from_complex(grid, np.sqrt(env * mod) * np.exp(1j * phase)).normalized()
