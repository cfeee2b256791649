"""
Matrix-free conjugate gradient for the symmetric positive definite systems
produced by the separation solvers.

The loop follows Shewchuk's formulation: the residual is updated recursively and
recomputed from scratch every `roundoff` iterations to stop drift.
"""

from typing import Callable, NamedTuple, Optional

import numpy as np  # Image arrays and vectorized per-pixel arithmetic


class CGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual: float  # ||b - A x|| / ||b|| at exit
    converged: bool


def conjugate_gradient(
    apply_matrix: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    x0: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 2000,
    callback: Optional[Callable[[np.ndarray, np.ndarray], None]] = None,
    roundoff: int = 50,
) -> CGResult:
    """
    Solves A x = b for SPD A given only x -> A x.

    * apply_matrix = function returning A x; must not modify its argument.
    * rhs          = b, any array shape (the shape of x).
    * x0           = initial guess (zeros when omitted); not modified.
    * tol          = stop once ||b - A x|| < tol * ||b||.
    * callback     = called as callback(x, r) after every iteration.
    """
    b = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0, True)

    r = b - apply_matrix(x)
    p = r.copy()
    delta = float(np.vdot(r, r))
    threshold = (tol * b_norm) ** 2

    it = 0
    while delta > threshold and it < max_iter:
        q = apply_matrix(p)
        curvature = float(np.vdot(p, q))
        if curvature <= 0.0:
            # Direction of zero curvature: A is singular along p, nothing more to gain.
            break
        alpha = delta / curvature
        x += alpha * p
        it += 1
        if it % roundoff == 0:
            r = b - apply_matrix(x)
        else:
            r -= alpha * q
        new_delta = float(np.vdot(r, r))
        p *= new_delta / delta
        p += r
        delta = new_delta
        if callback is not None:
            callback(x, r)

    residual = float(np.sqrt(delta)) / b_norm
    return CGResult(x, it, residual, residual < tol)
