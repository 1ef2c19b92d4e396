import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import two_cluster_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def benchmark_dataset():
    """The shared 2000-sample redundant-feature benchmark."""
    return two_cluster_dataset(
        n=2000,
        n_informative=4,
        n_copies=8,
        n_noise=8,
        separation=2.0,
        copy_noise=0.5,
        seed=7,
    )
