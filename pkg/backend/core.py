"""
Forward model of a camera with a polarizing micro-filter array.

A diffuse layer z_d (unpolarized, halved by any polarizer) and a specular layer
z_s (keeps the light's polarization, attenuated by Malus' law) are mixed per pixel
according to the orientation of the filter in front of that pixel:

    y(p) = 1/2 z_d(p) + cos^2(phi - theta_k(p)) z_s(p)

All functions here are pure. They accept single-channel (H, W) arrays or (H, W, C)
images; colour channels share the mask and the phase.
"""

import json  # Filter array files
import logging
import math
from typing import Tuple

import numpy as np  # Image arrays and vectorized per-pixel arithmetic

from backend.errors import OperatorSizeError, PatternError, ShapeError
from backend.schemas import CaptureConfig, FilterArray, OrientationSet
from backend.utils import atomic_write_text

logger = logging.getLogger(__name__)

# Largest pixel count for which the dense oracle matrix may be built.
DENSE_PIXEL_LIMIT = 4096


def as_image(data, name: str = "image") -> np.ndarray:
    """
    Normalizes an array to the (H, W, C) float64 image layout and checks it is finite.
    A 2-D input becomes a single-channel image.
    """
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0 or img.shape[2] == 0:
        raise ShapeError(f"{name} must have shape (H, W) or (H, W, C), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ShapeError(f"{name} contains NaN or Inf values")
    return img


def _check_plane(arr: np.ndarray, array: FilterArray, name: str) -> None:
    if arr.ndim not in (2, 3) or arr.shape[:2] != (array.height, array.width):
        raise ShapeError(
            f"{name} has shape {arr.shape}, filter array is {array.height}x{array.width}"
        )


def malus_attenuation(phase: float, theta: float) -> float:
    """Fraction of polarized light passing a polarizer: cos^2(phase - theta)."""
    delta = math.fmod(phase - theta, math.pi)
    return math.cos(delta) ** 2


def attenuation_map(array: FilterArray, phase: float) -> np.ndarray:
    """Per-pixel cos^2(phase - theta_k(p)), shape (H, W)."""
    per_orientation = np.cos(np.mod(phase - array.orientations.as_array(), np.pi)) ** 2
    return per_orientation[array.orientation_index]


def _broadcast(att: np.ndarray, arr: np.ndarray) -> np.ndarray:
    return att[:, :, None] if arr.ndim == 3 else att


def apply_operator(z_d: np.ndarray, z_s: np.ndarray, array: FilterArray, phase: float) -> np.ndarray:
    """Matrix-free S z: the noiseless mosaic of a diffuse/specular pair."""
    z_d = np.asarray(z_d, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    _check_plane(z_d, array, "diffuse")
    if z_s.shape != z_d.shape:
        raise ShapeError(f"specular shape {z_s.shape} differs from diffuse shape {z_d.shape}")
    att = _broadcast(attenuation_map(array, phase), z_d)
    return 0.5 * z_d + att * z_s


def apply_adjoint(y: np.ndarray, array: FilterArray, phase: float) -> Tuple[np.ndarray, np.ndarray]:
    """Matrix-free S^T y, returned as its (diffuse, specular) halves."""
    y = np.asarray(y, dtype=np.float64)
    _check_plane(y, array, "measurement")
    att = _broadcast(attenuation_map(array, phase), y)
    return 0.5 * y, att * y


def mosaic_capture(diffuse, specular, array: FilterArray, config: CaptureConfig) -> np.ndarray:
    """
    Simulates one exposure through the filter array.
    Noise is iid Gaussian from a PRNG seeded with config.seed; values are not clipped.
    """
    z_d = as_image(diffuse, "diffuse")
    z_s = as_image(specular, "specular")
    if z_d.shape != z_s.shape:
        raise ShapeError(f"diffuse {z_d.shape} and specular {z_s.shape} differ")
    y = apply_operator(z_d, z_s, array, config.phase)
    if config.noise_sigma > 0.0:
        rng = np.random.default_rng(config.seed)
        y = y + rng.normal(0.0, config.noise_sigma, size=y.shape)
    return y


def build_dense_operator(array: FilterArray, phase: float) -> np.ndarray:
    """
    Explicit S = A C for one channel, shape (N, 2N) with N = H*W (row-major pixels).
    Test oracle only: refuses images above DENSE_PIXEL_LIMIT pixels.
    """
    n = array.height * array.width
    if n > DENSE_PIXEL_LIMIT:
        raise OperatorSizeError(f"dense operator limited to {DENSE_PIXEL_LIMIT} pixels, got {n}")
    att = attenuation_map(array, phase).ravel()
    rows = np.arange(n)
    s = np.zeros((n, 2 * n))
    s[rows, rows] = 0.5
    s[rows, n + rows] = att
    return s


def render_orientation_stack(diffuse, specular, orientations: OrientationSet, phase: float) -> np.ndarray:
    """
    Full-resolution images X_k = 1/2 Z_d + cos^2(phi - theta_k) Z_s for every orientation,
    shape (H, W, K, C). This is what a camera would record with a rotating polarizer.
    """
    z_d = as_image(diffuse, "diffuse")
    z_s = as_image(specular, "specular")
    if z_d.shape != z_s.shape:
        raise ShapeError(f"diffuse {z_d.shape} and specular {z_s.shape} differ")
    att = np.cos(np.mod(phase - orientations.as_array(), np.pi)) ** 2
    return 0.5 * z_d[:, :, None, :] + att[None, None, :, None] * z_s[:, :, None, :]


def mosaic_from_stack(stack: np.ndarray, array: FilterArray) -> np.ndarray:
    """Keeps, at each pixel, only the stack entry of that pixel's orientation."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[:2] != (array.height, array.width) or stack.shape[2] != array.k:
        raise ShapeError(f"stack shape {stack.shape} does not match a {array.height}x{array.width} "
                         f"array with {array.k} orientations")
    idx = array.orientation_index[:, :, None, None]
    return np.take_along_axis(stack, idx, axis=2)[:, :, 0, :]


# --- FILTER ARRAY FILES ---
# On disk angles are degrees; in memory they are radians.

def filter_array_to_dict(array: FilterArray) -> dict:
    """JSON-ready layout: angles in degrees, indices flattened row-major."""
    return {
        "height": array.height,
        "width": array.width,
        "angles_deg": [math.degrees(a) for a in array.orientations.angles],
        "orientation_index": array.orientation_index.ravel().tolist(),
    }


def filter_array_from_dict(payload: dict) -> FilterArray:
    """
    Inverse of filter_array_to_dict. Raises PatternError for missing keys, non-integer
    indices, a wrong index count or an invalid orientation set.
    """
    try:
        height = int(payload["height"])
        width = int(payload["width"])
        angles = tuple(math.radians(float(a)) for a in payload["angles_deg"])
        raw = np.asarray(payload["orientation_index"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise PatternError(f"malformed filter array description: {exc}") from exc
    if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
        raise PatternError("orientation_index entries must be integers")
    index = raw.astype(np.int64)
    if index.size != height * width:
        raise PatternError(f"orientation_index has {index.size} entries, expected {height * width}")
    try:
        return FilterArray(orientation_index=index.reshape(height, width),
                           orientations=OrientationSet(angles=angles))
    except ValueError as exc:
        raise PatternError(str(exc)) from exc


def save_filter_array(path: str, array: FilterArray) -> None:
    atomic_write_text(path, json.dumps(filter_array_to_dict(array)))
    logger.debug("wrote filter array %s (%dx%d, K=%d)", path, array.height, array.width, array.k)


def load_filter_array(path: str) -> FilterArray:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise PatternError(f"{path}: not valid JSON ({exc})") from exc
    return filter_array_from_dict(payload)
