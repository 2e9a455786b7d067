import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_cloud(rng, n, grid=False):
    """Uniform cloud in the unit cube; ``grid`` snaps to a coarse lattice to force ties."""
    if grid:
        return rng.integers(-3, 4, size=(n, 3)) / 4.0
    return rng.uniform(-1, 1, size=(n, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
