"""
Joint demosaicing and diffuse/specular separation.

Every solver minimizes

    ||y - S z||^2 + gamma_d R(D z_d) + gamma_s R(D z_s)

over the "superimage" z = (z_d, z_s), for three choices of the penalty R:

* l2    : R(x) = x^2. The normal equations (S^T S + D^T W D) z = S^T y are
          solved matrix-free by conjugate gradient.
* l1    : R(x) = |x| (anisotropic TV), solved by split Bregman.
* huber : R(x) = 2 delta L_delta(x), solved by damped Newton from the l2 solution.

plus the two-stage baseline (interpolate every orientation, then fit a cosine per pixel).

Internally one colour channel is handled at a time as an (H, W, 2) array whose last
axis holds the diffuse and specular layers. Channels are independent solves.
"""

import logging
import time  # Wall-clock timing of every solve
from concurrent.futures import ThreadPoolExecutor  # Independent per-channel solves
from typing import Callable, List, NamedTuple, Tuple

import numpy as np  # Superimages, difference operators and per-pixel fits

from backend.core import DENSE_PIXEL_LIMIT, as_image, attenuation_map
from backend.errors import OperatorSizeError, PatternError, ShapeError, SingularSystemError, ValidationError
from backend.linalg import CGResult, conjugate_gradient
from backend.schemas import FilterArray, OrientationSet, SeparationResult, SolverConfig
from config.settings import settings

logger = logging.getLogger(__name__)

# Levenberg damping added to the Huber Hessian where L'' vanishes.
NEWTON_DAMPING = 1e-10
# Step halvings tried by the Newton line search before giving up.
MAX_HALVINGS = 30


# --- DIFFERENCE OPERATORS ---

class GradientField(NamedTuple):
    """Forward differences along columns (dx) and rows (dy); same shape as the input."""
    dx: np.ndarray
    dy: np.ndarray


def grad(img: np.ndarray) -> GradientField:
    """
    Forward differences over the first two axes with a Neumann boundary:
    the last column of dx and the last row of dy are zero.
    """
    img = np.asarray(img, dtype=np.float64)
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1, :] = img[1:, :] - img[:-1, :]
    return GradientField(dx, dy)


def div(g: GradientField) -> np.ndarray:
    """Exact negative adjoint of grad: <grad u, g> = -<u, div g>."""
    gx, gy = g
    out = np.zeros_like(gx)
    w = gx.shape[1]
    h = gx.shape[0]
    if w > 1:
        out[:, 0] += gx[:, 0]
        out[:, 1:-1] += gx[:, 1:-1] - gx[:, :-2]
        out[:, -1] -= gx[:, -2]
    if h > 1:
        out[0, :] += gy[0, :]
        out[1:-1, :] += gy[1:-1, :] - gy[:-2, :]
        out[-1, :] -= gy[-2, :]
    return out


def build_dense_gradient(height: int, width: int) -> np.ndarray:
    """
    Explicit D = [Dx; Dy] for one (height, width) image, shape (2N, N), row-major pixels.
    Test oracle only.
    """
    n = height * width
    if n > DENSE_PIXEL_LIMIT:
        raise OperatorSizeError(f"dense gradient limited to {DENSE_PIXEL_LIMIT} pixels, got {n}")
    eye = np.eye(n).reshape(n, height, width)
    columns = [grad(e) for e in eye]
    dx = np.stack([c.dx.ravel() for c in columns], axis=1)
    dy = np.stack([c.dy.ravel() for c in columns], axis=1)
    return np.vstack([dx, dy])


# --- SCALAR PENALTIES ---

def shrink(v, t):
    """
    Soft threshold sign(v) max(|v| - t, 0), the minimizer of t|d| + (d - v)^2 / 2.
    For gamma |d| + lambda (d - v)^2 use t = gamma / (2 lambda).
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    return out if out.ndim else float(out)


def huber_value(x, delta: float):
    """L_delta(x) = x^2 / (2 delta) for |x| < delta, |x| - delta / 2 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < delta, 0.5 * x * x / delta, ax - 0.5 * delta)
    return out if out.ndim else float(out)


def huber_grad(x, delta: float):
    """Derivative of huber_value: x / delta inside, sign(x) outside."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < delta, x / delta, np.sign(x))
    return out if out.ndim else float(out)


def _huber_curvature(x: np.ndarray, delta: float) -> np.ndarray:
    return np.where(np.abs(x) < delta, 1.0 / delta, 0.0)


# --- PER-CHANNEL OPERATORS ---
# z has shape (H, W, 2): z[..., 0] diffuse, z[..., 1] specular. y has shape (H, W).

class _Sampling:
    """S and S^T for one channel, with the attenuation map computed once."""

    def __init__(self, array: FilterArray, phase: float):
        self.att = attenuation_map(array, phase)

    def forward(self, z: np.ndarray) -> np.ndarray:
        return 0.5 * z[..., 0] + self.att * z[..., 1]

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        return np.stack([0.5 * r, self.att * r], axis=-1)

    def normal(self, z: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(z))


def _layer_weights(cfg: SolverConfig) -> np.ndarray:
    return np.array([cfg.gamma_d, cfg.gamma_s])


def l2_system_operator(array: FilterArray, phase: float, cfg: SolverConfig) -> Callable[[np.ndarray], np.ndarray]:
    """z -> (S^T S + D^T W D) z for one channel, z of shape (H, W, 2)."""
    sampling = _Sampling(array, phase)
    w = _layer_weights(cfg)

    def apply(z: np.ndarray) -> np.ndarray:
        g = grad(z)
        return sampling.normal(z) - div(GradientField(w * g.dx, w * g.dy))

    return apply


def l2_objective(z: np.ndarray, y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> float:
    """||y - S z||^2 + sum over layers of gamma ||D z||^2, for one (H, W, 2) superimage."""
    sampling = _Sampling(array, phase)
    g = grad(z)
    w = _layer_weights(cfg)
    data = float(np.sum((y - sampling.forward(z)) ** 2))
    return data + float(np.sum(w * (g.dx ** 2 + g.dy ** 2)))


def l1_objective(z: np.ndarray, y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> float:
    """Same data term as l2_objective with the anisotropic TV penalty gamma (|Dx z| + |Dy z|)."""
    sampling = _Sampling(array, phase)
    g = grad(z)
    w = _layer_weights(cfg)
    data = float(np.sum((y - sampling.forward(z)) ** 2))
    return data + float(np.sum(w * (np.abs(g.dx) + np.abs(g.dy))))


def huber_objective(z: np.ndarray, y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> float:
    """||y - S z||^2 + sum_layers gamma * 2 delta * L_delta(D z), one channel."""
    sampling = _Sampling(array, phase)
    g = grad(z)
    w = _layer_weights(cfg) * 2.0 * cfg.huber_delta
    data = float(np.sum((y - sampling.forward(z)) ** 2))
    penalty = huber_value(g.dx, cfg.huber_delta) + huber_value(g.dy, cfg.huber_delta)
    return data + float(np.sum(w * penalty))


def huber_gradient(z: np.ndarray, y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> np.ndarray:
    """Analytic gradient of huber_objective with respect to z."""
    sampling = _Sampling(array, phase)
    g = grad(z)
    w = _layer_weights(cfg) * 2.0 * cfg.huber_delta
    flux = GradientField(w * huber_grad(g.dx, cfg.huber_delta), w * huber_grad(g.dy, cfg.huber_delta))
    return 2.0 * sampling.adjoint(sampling.forward(z) - y) - div(flux)


# --- CHANNEL SOLVERS ---

class _ChannelResult(NamedTuple):
    z: np.ndarray
    iterations: int
    residual: float
    converged: bool
    objective_trace: List[float]
    constraint_trace: List[float]
    flags: List[str]


def _solve_l2_channel(y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> _ChannelResult:
    sampling = _Sampling(array, phase)
    rhs = sampling.adjoint(y)
    y_energy = float(np.vdot(y, y))
    trace = [y_energy]

    # With r = b - M z the quadratic objective is y^T y - z^T (b + r).
    def record(z, r):
        trace.append(y_energy - float(np.vdot(z, rhs + r)))

    res = conjugate_gradient(l2_system_operator(array, phase, cfg), rhs,
                             tol=cfg.cg_tol, max_iter=cfg.cg_max_iter, callback=record)
    flags = [] if res.converged else ["cg_max_iter"]
    return _ChannelResult(res.x, res.iterations, res.residual, res.converged, trace, [], flags)


def _solve_l1_channel(y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> _ChannelResult:
    sampling = _Sampling(array, phase)
    start = _solve_l2_channel(y, array, phase, cfg)
    z = start.z
    flags = list(start.flags)
    lam = cfg.lam
    thresholds = _layer_weights(cfg) / (2.0 * lam)

    def coupled(v):
        return sampling.normal(v) - lam * div(grad(v))

    d = grad(z)
    b = GradientField(np.zeros_like(z), np.zeros_like(z))
    data_rhs = sampling.adjoint(y)
    objective = [l1_objective(z, y, array, phase, cfg)]
    constraint = []
    converged = False
    residual = start.residual
    it = 0
    for it in range(1, cfg.outer_max_iter + 1):
        rhs = data_rhs - lam * div(GradientField(d.dx - b.dx, d.dy - b.dy))
        res: CGResult = conjugate_gradient(coupled, rhs, x0=z, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)
        residual = res.residual
        if not res.converged and "cg_max_iter" not in flags:
            flags.append("cg_max_iter")
        z_new = res.x

        gz = grad(z_new)
        d = GradientField(shrink(gz.dx + b.dx, thresholds), shrink(gz.dy + b.dy, thresholds))
        b = GradientField(b.dx + gz.dx - d.dx, b.dy + gz.dy - d.dy)

        constraint.append(float(np.sqrt(np.sum((gz.dx - d.dx) ** 2) + np.sum((gz.dy - d.dy) ** 2))))
        objective.append(l1_objective(z_new, y, array, phase, cfg))
        change = float(np.linalg.norm(z_new - z)) / max(float(np.linalg.norm(z)), 1e-30)
        z = z_new
        logger.debug("split Bregman iteration %d: change %.3e, ||Dz-d|| %.3e", it, change, constraint[-1])
        if change < cfg.outer_tol:
            converged = True
            break
    if not converged:
        flags.append("outer_max_iter")
    return _ChannelResult(z, it, residual, converged, objective, constraint, flags)


def _solve_huber_channel(y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> _ChannelResult:
    sampling = _Sampling(array, phase)
    start = _solve_l2_channel(y, array, phase, cfg)
    z = start.z
    flags = list(start.flags)
    w = _layer_weights(cfg) * 2.0 * cfg.huber_delta
    delta = cfg.huber_delta

    def f(v):
        return huber_objective(v, y, array, phase, cfg)

    value = f(z)
    trace = [value]
    converged = False
    residual = start.residual
    it = 0
    for it in range(cfg.outer_max_iter):
        gradient = huber_gradient(z, y, array, phase, cfg)
        if float(np.linalg.norm(gradient)) < cfg.outer_tol * (1.0 + value):
            converged = True
            break

        g = grad(z)
        cx = w * _huber_curvature(g.dx, delta)
        cy = w * _huber_curvature(g.dy, delta)

        def hessian(v):
            gv = grad(v)
            return 2.0 * sampling.normal(v) - div(GradientField(cx * gv.dx, cy * gv.dy)) + NEWTON_DAMPING * v

        res = conjugate_gradient(hessian, -gradient, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)
        residual = res.residual
        step = res.x
        if float(np.vdot(gradient, step)) >= 0.0:
            step = -gradient

        # Backtracking: halve the step until the objective decreases.
        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            candidate = z + t * step
            candidate_value = f(candidate)
            if candidate_value < value:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            flags.append("line_search_failed")
            break
        z = candidate
        value = candidate_value
        trace.append(value)
        logger.debug("Newton iteration %d: objective %.6e, step %.3g", it + 1, value, t)
    else:
        # Loop exhausted without the gradient test passing.
        gradient = huber_gradient(z, y, array, phase, cfg)
        converged = float(np.linalg.norm(gradient)) < cfg.outer_tol * (1.0 + value)
        it = cfg.outer_max_iter
    if not converged and "line_search_failed" not in flags:
        flags.append("outer_max_iter")
    return _ChannelResult(z, it, residual, converged, trace, [], flags)


# --- TWO-STAGE BASELINE ---

def fit_cosine_stack(stack: np.ndarray, orientations: OrientationSet, phase: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel least squares of X_k = 1/2 z_d + cos^2(phi - theta_k) z_s.

    `stack` has shape (H, W, K) or (H, W, K, C); returns (H, W, C) diffuse and specular images.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 3:
        stack = stack[..., None]
    if stack.ndim != 4 or stack.shape[2] != orientations.k:
        raise ShapeError(f"stack shape {stack.shape} does not carry {orientations.k} orientations")
    att = np.cos(np.mod(phase - orientations.as_array(), np.pi)) ** 2
    design = np.column_stack([np.full(orientations.k, 0.5), att])
    if np.ptp(att) < 1e-12 or np.linalg.matrix_rank(design) < 2:
        raise SingularSystemError("fewer than 2 distinct cos^2 values: per-pixel fit is singular")
    h, w, k, c = stack.shape
    samples = np.moveaxis(stack, 2, 0).reshape(k, -1)
    coef, *_ = np.linalg.lstsq(design, samples, rcond=None)
    coef = coef.reshape(2, h, w, c)
    return coef[0], coef[1]


def _interpolate_orientation(y: np.ndarray, mask: np.ndarray, gamma: float, cfg: SolverConfig) -> CGResult:
    """argmin_x ||A_k (x - y)||^2 + gamma ||D x||^2 for one channel."""
    m = mask.astype(np.float64)

    def apply(x):
        return m * x - gamma * div(grad(x))

    return conjugate_gradient(apply, m * y, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)


def _solve_two_stage_channel(y: np.ndarray, array: FilterArray, phase: float, cfg: SolverConfig) -> _ChannelResult:
    interpolated = []
    iterations = 0
    residual = 0.0
    flags = []
    for k in range(array.k):
        res = _interpolate_orientation(y, array.mask(k), cfg.gamma_d, cfg)
        iterations = max(iterations, res.iterations)
        residual = max(residual, res.residual)
        if not res.converged and "cg_max_iter" not in flags:
            flags.append("cg_max_iter")
        interpolated.append(res.x)
    stack = np.stack(interpolated, axis=-1)
    diffuse, specular = fit_cosine_stack(stack, array.orientations, phase)
    z = np.stack([diffuse[..., 0], specular[..., 0]], axis=-1)
    return _ChannelResult(z, iterations, residual, not flags, [], [], flags)


# --- PUBLIC ENTRY POINTS ---

_CHANNEL_SOLVERS = {
    "l2": _solve_l2_channel,
    "l1": _solve_l1_channel,
    "huber": _solve_huber_channel,
    "two_stage": _solve_two_stage_channel,
}


def _sum_traces(traces: List[List[float]]) -> List[float]:
    """Adds per-channel traces, holding each shorter trace at its final value."""
    traces = [t for t in traces if t]
    if not traces:
        return []
    length = max(len(t) for t in traces)
    total = np.zeros(length)
    for t in traces:
        total += np.concatenate([t, np.full(length - len(t), t[-1])])
    return total.tolist()


def _run(norm: str, y, array: FilterArray, phase: float, cfg: SolverConfig) -> SeparationResult:
    img = as_image(y, "measurement")
    if img.shape[:2] != (array.height, array.width):
        raise ShapeError(f"measurement {img.shape[:2]} does not match filter array "
                         f"{array.height}x{array.width}")
    solve = _CHANNEL_SOLVERS[norm]
    channels = [img[:, :, c] for c in range(img.shape[2])]

    started = time.perf_counter()
    workers = min(settings.THREADS, len(channels))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda ch: solve(ch, array, phase, cfg), channels))
    else:
        results = [solve(ch, array, phase, cfg) for ch in channels]

    flags: List[str] = []
    for r in results:
        flags.extend(f for f in r.flags if f not in flags)
    result = SeparationResult(
        diffuse=np.stack([r.z[..., 0] for r in results], axis=-1),
        specular=np.stack([r.z[..., 1] for r in results], axis=-1),
        solver=norm,
        iterations=max(r.iterations for r in results),
        final_residual=max(r.residual for r in results),
        objective_trace=_sum_traces([r.objective_trace for r in results]),
        constraint_residual_trace=_sum_traces([r.constraint_trace for r in results]),
        converged=all(r.converged for r in results),
        flags=flags,
    )
    level = logging.INFO if result.converged else logging.WARNING
    logger.log(level, "%s separation of %dx%dx%d: %d iterations, residual %.2e, %.2fs%s",
               norm, img.shape[0], img.shape[1], img.shape[2], result.iterations,
               result.final_residual, time.perf_counter() - started,
               "" if result.converged else f" (not converged: {', '.join(flags)})")
    return result


def _require_norm(norm: str, cfg: SolverConfig) -> None:
    if cfg.norm != norm:
        raise ValidationError(f"separate_{norm} called with a config for norm {cfg.norm!r}")


def separate_l2(y, array: FilterArray, phase: float, cfg: SolverConfig) -> SeparationResult:
    """Quadratic-TV separation: CG on (S^T S + D^T W D) z = S^T y."""
    _require_norm("l2", cfg)
    return _run("l2", y, array, phase, cfg)


def separate_l1(y, array: FilterArray, phase: float, cfg: SolverConfig) -> SeparationResult:
    """
    Anisotropic TV separation by split Bregman, started from the l2 solution.
    constraint_residual_trace records ||D z - d|| after every outer iteration.
    """
    _require_norm("l1", cfg)
    return _run("l1", y, array, phase, cfg)


def separate_huber(y, array: FilterArray, phase: float, cfg: SolverConfig) -> SeparationResult:
    """Huber-TV separation by damped Newton with backtracking, started from the l2 solution."""
    _require_norm("huber", cfg)
    return _run("huber", y, array, phase, cfg)


def separate_two_stage(y, array: FilterArray, phase: float, cfg: SolverConfig) -> SeparationResult:
    """Baseline: interpolate each orientation image with l2-TV, then fit a cosine per pixel."""
    _require_norm("two_stage", cfg)
    missing = np.flatnonzero(array.counts() == 0)
    if missing.size:
        raise PatternError(f"two-stage separation needs every orientation; missing {missing.tolist()}")
    return _run("two_stage", y, array, phase, cfg)


def separate(y, array: FilterArray, phase: float, cfg: SolverConfig) -> SeparationResult:
    """Dispatches on cfg.norm."""
    return SOLVERS[cfg.norm](y, array, phase, cfg)


SOLVERS = {
    "l2": separate_l2,
    "l1": separate_l1,
    "huber": separate_huber,
    "two_stage": separate_two_stage,
}
