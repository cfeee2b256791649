import os
import sys

import numpy as np
import pytest

# Make `backend`, `config` and `frontend` importable without installing the project
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from backend.patterns import generate_pattern  # noqa: E402
from backend.schemas import PatternSpec, SolverConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_array():
    """12x10 random array, K=4."""
    return generate_pattern(PatternSpec(kind="random", k=4, seed=3, height=12, width=10))


@pytest.fixture
def tight_solver():
    """Defaults with a CG tolerance tight enough for oracle comparisons."""
    return SolverConfig(cg_tol=1e-12, cg_max_iter=20000)


def random_array(rng, height, width, k, seed=None):
    return generate_pattern(PatternSpec(kind="random", k=k, height=height, width=width,
                                        seed=int(rng.integers(1 << 30)) if seed is None else seed))
