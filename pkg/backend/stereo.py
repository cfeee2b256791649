"""
Lambertian photometric stereo and normal-map error metrics.
"""

import logging
from typing import NamedTuple, Sequence

import numpy as np  # Image arrays and vectorized per-pixel arithmetic

from backend.errors import LightConfigurationError, NoValidPixelsError, ShapeError
from backend.schemas import NormalMap

logger = logging.getLogger(__name__)

# Observations at or below this intensity (linear units) are treated as shadowed.
SHADOW_THRESHOLD = 0.01
MIN_ALBEDO = 1e-8


def luma(image: np.ndarray) -> np.ndarray:
    """Channel mean of an (H, W, C) image; (H, W) input is returned as float."""
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=2) if image.ndim == 3 else image


def _check_lights(lights: np.ndarray) -> np.ndarray:
    lights = np.asarray(lights, dtype=np.float64)
    if lights.ndim != 2 or lights.shape[1] != 3:
        raise LightConfigurationError(f"lights must have shape (L, 3), got {lights.shape}")
    if lights.shape[0] < 3:
        raise LightConfigurationError(f"photometric stereo needs at least 3 lights, got {lights.shape[0]}")
    if np.linalg.matrix_rank(lights) < 3:
        raise LightConfigurationError("light directions are coplanar (rank < 3)")
    return lights


def photometric_stereo(images: Sequence[np.ndarray], lights, threshold: float = SHADOW_THRESHOLD) -> NormalMap:
    """
    Per-pixel least squares L_sel g = i_sel over the unshadowed observations.

    Pixels sharing the same set of lit observations are solved together in one
    multi right-hand-side least-squares call. Pixels with fewer than 3 lit
    observations (or a rank-deficient lit subset) are marked invalid.
    """
    lights = _check_lights(lights)
    stack = np.stack([luma(img) for img in images], axis=-1)
    if stack.shape[-1] != lights.shape[0]:
        raise ShapeError(f"{stack.shape[-1]} images for {lights.shape[0]} lights")
    h, w, n_lights = stack.shape
    intensities = stack.reshape(-1, n_lights)
    lit = intensities > threshold

    g = np.zeros((h * w, 3))
    solved = np.zeros(h * w, dtype=bool)
    patterns, group = np.unique(lit, axis=0, return_inverse=True)
    group = np.asarray(group).ravel()
    for gi, pattern in enumerate(patterns):
        if pattern.sum() < 3:
            continue
        selected = lights[pattern]
        if np.linalg.matrix_rank(selected) < 3:
            continue
        pixels = np.flatnonzero(group == gi)
        rhs = intensities[np.ix_(pixels, np.flatnonzero(pattern))].T
        g[pixels] = np.linalg.lstsq(selected, rhs, rcond=None)[0].T
        solved[pixels] = True

    albedo = np.linalg.norm(g, axis=1)
    valid = solved & (albedo > MIN_ALBEDO)
    normals = np.zeros((h * w, 3))
    normals[:, 2] = 1.0
    normals[valid] = g[valid] / albedo[valid, None]
    albedo = np.where(valid, albedo, 0.0)
    logger.info("photometric stereo: %d lights, %d/%d valid pixels", n_lights, int(valid.sum()), h * w)
    return NormalMap(normals=normals.reshape(h, w, 3), albedo=albedo.reshape(h, w),
                     valid=valid.reshape(h, w))


class AngularErrorReport(NamedTuple):
    mean_deg: float
    median_deg: float
    error_map: np.ndarray  # (H, W, 1) degrees, 0 where either map is invalid


def angular_error(estimate: NormalMap, truth: NormalMap) -> AngularErrorReport:
    """Angle between estimated and true normals over the jointly valid pixels."""
    if estimate.normals.shape != truth.normals.shape:
        raise ShapeError(f"normal maps differ in shape: {estimate.normals.shape} vs {truth.normals.shape}")
    joint = estimate.valid & truth.valid
    if not joint.any():
        raise NoValidPixelsError("the two normal maps share no valid pixel")
    # atan2 keeps small angles accurate where arccos of a rounded dot product does not
    cosine = np.sum(estimate.normals * truth.normals, axis=-1)
    sine = np.linalg.norm(np.cross(estimate.normals, truth.normals), axis=-1)
    errors = np.degrees(np.arctan2(sine, cosine))
    error_map = np.where(joint, errors, 0.0)[..., None]
    values = errors[joint]
    return AngularErrorReport(float(values.mean()), float(np.median(values)), error_map)


def reconstruct_images(normal_map: NormalMap, lights) -> np.ndarray:
    """Re-rendered Lambertian intensities albedo max(0, n.l), shape (H, W, L)."""
    lights = np.asarray(lights, dtype=np.float64)
    shading = np.maximum(normal_map.normals @ lights.T, 0.0)
    return normal_map.albedo[..., None] * shading * normal_map.valid[..., None]


def reprojection_rms(images: Sequence[np.ndarray], normal_map: NormalMap, lights) -> float:
    """RMS difference between the inputs and their re-rendering, over valid pixels."""
    stack = np.stack([luma(img) for img in images], axis=-1)
    diff = (stack - reconstruct_images(normal_map, lights))[normal_map.valid]
    return float(np.sqrt(np.mean(diff ** 2))) if diff.size else 0.0
