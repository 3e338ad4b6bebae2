import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.volume import MaskVolume, Volume  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_volume(rng):
    """8³ smooth random image in [0, 1]."""
    from scipy import ndimage

    data = ndimage.gaussian_filter(rng.random((8, 8, 8)), sigma=1.5)
    data = (data - data.min()) / (data.max() - data.min())
    return Volume((8, 8, 8), (1.0, 1.0, 1.0), data)


@pytest.fixture
def cube_mask():
    """8³ mask with a 4³ cube at [2, 6) on every axis."""
    data = np.zeros((8, 8, 8))
    data[2:6, 2:6, 2:6] = 1.0
    return MaskVolume((8, 8, 8), (1.0, 1.0, 1.0), data)


@pytest.fixture
def ramp_volume():
    """6³ image with f(x, y, z) = x."""
    data = np.broadcast_to(np.arange(6, dtype=np.float64)[:, None, None], (6, 6, 6))
    return Volume((6, 6, 6), (1.0, 1.0, 1.0), data)
