import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deconfrec.data import SparseInteractions  # noqa: E402


def random_ratings(U, I, density, seed, scale=(1, 5)):
    rng = np.random.default_rng(seed)
    mask = rng.random((U, I)) < density
    vals = rng.integers(scale[0], scale[1] + 1, size=(U, I)).astype(float)
    return SparseInteractions.from_dense(np.where(mask, vals, 0.0))


@pytest.fixture
def small_ratings():
    return random_ratings(30, 25, 0.3, seed=1)
