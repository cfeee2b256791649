"""
Estimation of the light polarization phase from a single mosaic.

The mean of every orientation class obeys mu_k = mu_d + mu_s cos^2(phi - theta_k),
so three unknowns are fitted to K means: a 1 degree grid over phi (with the linear
pair solved exactly at each node) followed by Gauss-Newton refinement.
"""

import logging
import math
from typing import List, Sequence

import numpy as np

from backend.core import as_image
from backend.errors import PatternError, ShapeError, ValidationError
from backend.schemas import FilterArray, OrientationSet, PhaseEstimate

logger = logging.getLogger(__name__)

GRID_STEP_DEG = 1.0
GN_MAX_ITER = 50
# mu_s below this fraction of the largest mean counts as "no specular signal".
IDENTIFIABILITY_RATIO = 1e-6


def orientation_means(y, array: FilterArray) -> List[float]:
    """Mean measurement of every orientation class, averaged over channels."""
    img = as_image(y, "measurement")
    if img.shape[:2] != (array.height, array.width):
        raise ShapeError(f"measurement {img.shape[:2]} does not match filter array "
                         f"{array.height}x{array.width}")
    counts = array.counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise PatternError(f"orientations {empty.tolist()} have no pixels")
    per_pixel = img.mean(axis=2).ravel()
    sums = np.bincount(array.orientation_index.ravel(), weights=per_pixel, minlength=array.k)
    return (sums / counts).tolist()


def _linear_fit(means: np.ndarray, att: np.ndarray):
    """Least-squares (mu_d, mu_s) for fixed attenuations; mu_s held at 0 when negative."""
    design = np.column_stack([np.ones_like(att), att])
    (mu_d, mu_s), *_ = np.linalg.lstsq(design, means, rcond=None)
    if mu_s < 0.0:
        mu_d, mu_s = float(means.mean()), 0.0
    r = means - mu_d - mu_s * att
    return float(mu_d), float(mu_s), float(np.dot(r, r))


def _gauss_newton(means: np.ndarray, thetas: np.ndarray, phase: float, mu_d: float, mu_s: float):
    params = np.array([phase, mu_d, mu_s])

    def residuals(p):
        return means - p[1] - p[2] * np.cos(p[0] - thetas) ** 2

    r = residuals(params)
    cost = float(np.dot(r, r))
    for _ in range(GN_MAX_ITER):
        # Jacobian of the residuals with respect to (phi, mu_d, mu_s).
        jac = np.column_stack([
            params[2] * np.sin(2.0 * (params[0] - thetas)),
            -np.ones_like(thetas),
            -np.cos(params[0] - thetas) ** 2,
        ])
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        t = 1.0
        improved = False
        for _ in range(20):
            candidate = params + t * step
            rc = residuals(candidate)
            cc = float(np.dot(rc, rc))
            if cc < cost:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        params, r, cost = candidate, rc, cc
        if np.max(np.abs(t * step)) < 1e-15:
            break
    return params


def estimate_phase(means: Sequence[float], orientations: OrientationSet) -> PhaseEstimate:
    """
    Fits (phi, mu_d, mu_s) to per-orientation means.

    K > 3 is overdetermined; K = 3 is accepted with `exactly_determined` set.
    The phase is returned in [0, pi).
    """
    means = np.asarray(means, dtype=np.float64)
    thetas = orientations.as_array()
    k = thetas.size
    if means.shape != (k,):
        raise ShapeError(f"{means.size} means for {k} orientations")
    if k < 3:
        raise ValidationError(f"phase estimation needs at least 3 orientations, got {k}")
    exactly_determined = k == 3
    if exactly_determined:
        logger.warning("phase fitted from exactly 3 orientations: no redundancy to check the fit")

    # 1. Coarse grid over phi with the linear pair solved exactly at each node
    grid = np.deg2rad(np.arange(0.0, 180.0, GRID_STEP_DEG))
    best = None
    for phi in grid:
        mu_d, mu_s, cost = _linear_fit(means, np.cos(phi - thetas) ** 2)
        if best is None or cost < best[3]:
            best = (phi, mu_d, mu_s, cost)
    phi, mu_d, mu_s, _ = best

    # 2. Identifiability: a vanishing cosine amplitude leaves phi undetermined
    scale = float(np.max(np.abs(means))) if means.size else 0.0
    if mu_s <= IDENTIFIABILITY_RATIO * scale:
        rms = float(np.sqrt(np.mean((means - means.mean()) ** 2)))
        return PhaseEstimate(phase=0.0, mu_d=float(means.mean()), mu_s=0.0, residual=rms,
                             identifiable=False, exactly_determined=exactly_determined)

    # 3. Gauss-Newton refinement from the best node
    phi, mu_d, mu_s = _gauss_newton(means, thetas, phi, mu_d, mu_s)
    if mu_s < 0.0:
        # mu_s cos^2(x) == mu_s + (-mu_s) cos^2(x + pi/2)
        phi, mu_d, mu_s = phi + math.pi / 2.0, mu_d + mu_s, -mu_s
    phi = float(np.mod(phi, math.pi))
    if phi >= math.pi:
        phi = 0.0
    mu_s = max(float(mu_s), 0.0)
    r = means - mu_d - mu_s * np.cos(phi - thetas) ** 2
    identifiable = mu_s > IDENTIFIABILITY_RATIO * scale
    return PhaseEstimate(phase=phi, mu_d=float(mu_d), mu_s=mu_s,
                         residual=float(np.sqrt(np.mean(r * r))),
                         identifiable=identifiable, exactly_determined=exactly_determined)


def estimate_phase_from_mosaic(y, array: FilterArray) -> PhaseEstimate:
    """orientation_means followed by estimate_phase."""
    return estimate_phase(orientation_means(y, array), array.orientations)
