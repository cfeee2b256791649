"""
Procedural ground truth: scenes with separately rendered diffuse and specular layers,
and light-dome capture simulation.

Shading is Lambertian for the diffuse layer and Blinn-Phong for the specular layer,
with an orthographic camera looking down the z axis.
"""

import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np  # Scene buffers and shading
from scipy.ndimage import gaussian_filter  # Low-pass filtering for textures and height fields
from scipy.spatial.distance import pdist  # Pairwise angles between dome lights

from backend.core import mosaic_capture
from backend.errors import ShapeError, ValidationError
from backend.schemas import CaptureConfig, FilterArray, LightDome, NormalMap, Scene, SceneSpec

logger = logging.getLogger(__name__)

VIEW_DIRECTION = np.array([0.0, 0.0, 1.0])
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
SPHERE_FADE = 0.25  # width of the sphere matte ramp, as a fraction of the radius


def _normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def _texture(rng: np.random.Generator, size: int, channels: int, low: float, high: float) -> np.ndarray:
    """Smooth albedo: white noise low-passed at size / 16, stretched to [low, high] per channel."""
    noise = rng.uniform(size=(size, size, channels))
    smooth = gaussian_filter(noise, sigma=(size / 16.0, size / 16.0, 0), mode="reflect")
    lo = smooth.min(axis=(0, 1), keepdims=True)
    span = np.maximum(smooth.max(axis=(0, 1), keepdims=True) - lo, 1e-12)
    return low + (high - low) * (smooth - lo) / span


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_scene(kind: str, size: int, seed: int, channels: int = 1,
               specular_coeff: float = 0.5, shininess: float = 50.0,
               albedo_gain: float = 1.0) -> Scene:
    """
    Builds a deterministic procedural scene.

    sphere        -- orthographic hemisphere over a black backdrop; the centre pixel
                     (size // 2, size // 2) faces the camera. Its matte fades from 1 to 0
                     over the outer SPHERE_FADE of the radius.
    heightmap     -- smoothed random height field; normals from its gradient.
    flat_textured -- n = (0, 0, 1) everywhere with a smooth albedo texture.

    albedo_gain scales the finished albedo map, giving dark, specular-dominated materials.
    """
    if size < 16:
        raise ValidationError(f"scene size must be at least 16, got {size}")
    if channels not in (1, 3):
        raise ValidationError(f"scenes have 1 or 3 channels, got {channels}")
    if not 0.0 < albedo_gain <= 1.0:
        raise ValidationError(f"albedo gain must lie in (0, 1], got {albedo_gain}")
    rng = np.random.default_rng(seed)
    normals = np.zeros((size, size, 3))
    normals[..., 2] = 1.0
    matte = None

    if kind == "sphere":
        centre = size // 2
        radius = 0.4 * size
        rows, cols = np.mgrid[0:size, 0:size]
        x = (cols - centre) / radius
        y = (centre - rows) / radius  # image rows grow downwards, y grows upwards
        rho = np.sqrt(x * x + y * y)
        inside = rho < 1.0
        normals[inside, 0] = x[inside]
        normals[inside, 1] = y[inside]
        normals[inside, 2] = np.sqrt(1.0 - x[inside] ** 2 - y[inside] ** 2)
        matte = _smoothstep((1.0 - rho) / SPHERE_FADE)
        base = rng.uniform(0.4, 0.9, size=channels)
        albedo = np.clip(base + 0.1 * (_texture(rng, size, channels, 0.0, 1.0) - 0.5), 0.0, 1.0)
    elif kind == "heightmap":
        height = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 16.0, mode="reflect")
        height *= 0.15 * size / max(float(np.ptp(height)), 1e-12)
        hy, hx = np.gradient(height)
        # Surface z = h(x, y) with y pointing up: n ~ (-h_x, h_row, 1).
        normals = _normalize(np.stack([-hx, hy, np.ones_like(hx)], axis=-1))
        albedo = _texture(rng, size, channels, 0.3, 0.9)
    elif kind == "flat_textured":
        albedo = _texture(rng, size, channels, 0.1, 0.9)
    else:
        raise ValidationError(f"unknown scene kind {kind!r}")

    return Scene(normals=normals, albedo=albedo_gain * albedo, specular_coeff=specular_coeff,
                 shininess=shininess, matte=matte)


def build_scene(spec: SceneSpec) -> Scene:
    """Scene for a manifest recipe."""
    return make_scene(spec.kind, spec.size, spec.seed, channels=spec.channels,
                      specular_coeff=spec.specular_coeff, shininess=spec.shininess,
                      albedo_gain=spec.albedo_gain)


def render_layers(scene: Scene, light: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Diffuse = albedo max(0, n.l); specular = k_s max(0, n.h)^alpha with h = normalize(l + v).
    Both clipped to [0, 1] and then weighted by the scene matte; the specular highlight
    is white (same in every channel).
    """
    light = np.asarray(light, dtype=np.float64)
    if light.shape != (3,) or abs(float(np.linalg.norm(light)) - 1.0) > 1e-9:
        raise ValidationError("light must be a unit 3-vector")
    n_dot_l = np.maximum(scene.normals @ light, 0.0)
    half = _normalize(light + VIEW_DIRECTION)
    n_dot_h = np.maximum(scene.normals @ half, 0.0)
    coverage = scene.coverage()[..., None]
    diffuse = np.clip(scene.albedo * n_dot_l[..., None], 0.0, 1.0) * coverage
    highlight = scene.specular_coeff * n_dot_h ** scene.shininess
    specular = np.clip(np.repeat(highlight[..., None], scene.albedo.shape[2], axis=2), 0.0, 1.0) * coverage
    return diffuse, specular


# --- LIGHT DOME ---

def make_light_dome(count: int = 58, max_zenith_deg: float = 80.0,
                    phases: Optional[Sequence[float]] = None) -> LightDome:
    """
    Golden-spiral placement over the spherical cap of half-angle max_zenith_deg:
    equal-area bands in z, successive lights rotated by the golden angle.
    """
    if count < 3:
        raise ValidationError(f"a light dome needs at least 3 lights, got {count}")
    z_min = math.cos(math.radians(max_zenith_deg))
    i = np.arange(count)
    z = 1.0 - (i + 0.5) / count * (1.0 - z_min)
    r = np.sqrt(1.0 - z * z)
    azimuth = i * GOLDEN_ANGLE
    directions = np.column_stack([r * np.cos(azimuth), r * np.sin(azimuth), z])
    return LightDome(directions=_normalize(directions), phases=phases)


def random_light_phases(count: int, seed: int) -> np.ndarray:
    """Individual polarizer angles for every lamp, uniform in [0, pi)."""
    return np.random.default_rng(seed).uniform(0.0, math.pi, size=count)


def min_pairwise_angle_deg(directions: np.ndarray) -> float:
    """Smallest angle between any two directions, in degrees."""
    cos_dist = pdist(np.asarray(directions, dtype=np.float64), metric="cosine")
    return float(np.degrees(np.arccos(np.clip(1.0 - cos_dist.min(), -1.0, 1.0))))


class DomeCapture(NamedTuple):
    mosaics: List[np.ndarray]  # pipeline input, one per light
    diffuse: List[np.ndarray]  # ground-truth diffuse layers
    specular: List[np.ndarray]  # ground-truth specular layers
    phases: List[float]  # phase used for every light


def simulate_dome_captures(scene: Scene, dome: LightDome, array: FilterArray,
                           config: CaptureConfig) -> DomeCapture:
    """
    One mosaic per lamp through the same filter array.

    Light i uses the dome's own phase when the dome carries per-lamp phases, the
    global config.phase otherwise, and noise seed config.seed + i.
    """
    if (scene.height, scene.width) != (array.height, array.width):
        raise ShapeError(f"scene {scene.height}x{scene.width} does not match filter array "
                         f"{array.height}x{array.width}")
    mosaics, diffuse_stack, specular_stack, phases = [], [], [], []
    for i, light in enumerate(dome.directions):
        phase = float(dome.phases[i]) if dome.phases is not None else config.phase
        diffuse, specular = render_layers(scene, light)
        light_config = config.model_copy(update={"phase": phase, "seed": config.seed + i})
        mosaics.append(mosaic_capture(diffuse, specular, array, light_config))
        diffuse_stack.append(diffuse)
        specular_stack.append(specular)
        phases.append(phase)
    logger.info("simulated %d dome captures of %dx%d", dome.count, scene.height, scene.width)
    return DomeCapture(mosaics, diffuse_stack, specular_stack, phases)


def normal_map_from_scene(scene: Scene) -> NormalMap:
    """Analytic normals of the scene, valid where the matte is full; albedo is the channel mean."""
    return NormalMap(normals=scene.normals, albedo=scene.albedo.mean(axis=2),
                     valid=scene.coverage() >= 1.0)
