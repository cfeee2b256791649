"""
Filter-array layouts: regular tiled grids and seeded random patterns.
"""

import logging
import math

import numpy as np  # Image arrays and vectorized per-pixel arithmetic

from backend.errors import PatternError
from backend.schemas import FilterArray, OrientationSet, PatternSpec

logger = logging.getLogger(__name__)

# Redraws allowed when a random pattern misses an orientation.
MAX_REDRAWS = 1000


def generate_orientations(k: int) -> OrientationSet:
    """K equally spaced orientations j*pi/K, j = 0..K-1."""
    if k < 2:
        raise PatternError(f"at least 2 orientations are required, got {k}")
    return OrientationSet(angles=tuple(j * math.pi / k for j in range(k)))


def _regular_index(k: int, height: int, width: int) -> np.ndarray:
    side = math.isqrt(k)
    if side * side != k:
        raise PatternError(f"regular patterns need a square number of orientations, got {k}")
    if height < side or width < side:
        raise PatternError(f"a {height}x{width} array cannot hold a {side}x{side} tile")
    tile = np.arange(k, dtype=np.int64).reshape(side, side)
    reps = (-(-height // side), -(-width // side))
    return np.tile(tile, reps)[:height, :width]


def _random_index(k: int, seed: int, height: int, width: int) -> np.ndarray:
    # A missing orientation leaves its mean undefined, so such draws are replaced
    # by a draw from the next seed. Arrays smaller than K pixels cannot be complete.
    can_cover = height * width >= k
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng(seed + attempt)
        index = rng.integers(0, k, size=(height, width), dtype=np.int64)
        if not can_cover or np.unique(index).size == k:
            if attempt:
                logger.warning("random pattern seed %d missed an orientation; used seed %d",
                               seed, seed + attempt)
            return index
    raise PatternError(f"no complete {height}x{width} pattern with {k} orientations "
                       f"after {MAX_REDRAWS} draws")


def generate_pattern(spec: PatternSpec) -> FilterArray:
    """
    Builds the filter array described by `spec`.

    Regular: a sqrt(K) x sqrt(K) tile holding indices 0..K-1 row-major, repeated.
    Random: iid uniform indices from the seeded PRNG; same seed, same array.
    """
    if spec.height is None or spec.width is None:
        raise PatternError("pattern spec needs height and width")
    if spec.kind == "regular":
        index = _regular_index(spec.k, spec.height, spec.width)
    else:
        index = _random_index(spec.k, spec.seed, spec.height, spec.width)
    return FilterArray(orientation_index=index, orientations=generate_orientations(spec.k))
