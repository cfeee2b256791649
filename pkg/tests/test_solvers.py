import math

import numpy as np
import pytest

from backend.core import build_dense_operator, mosaic_capture, render_orientation_stack
from backend.errors import OperatorSizeError, PatternError, ShapeError, SingularSystemError, ValidationError
from backend.patterns import generate_pattern
from backend.schemas import CaptureConfig, FilterArray, OrientationSet, PatternSpec, SolverConfig
from backend.solvers import (
    GradientField,
    build_dense_gradient,
    div,
    fit_cosine_stack,
    grad,
    huber_grad,
    huber_gradient,
    huber_objective,
    huber_value,
    l2_objective,
    l2_system_operator,
    separate,
    separate_huber,
    separate_l1,
    separate_l2,
    separate_two_stage,
    shrink,
)
from backend.synth import make_scene, render_layers
from tests.conftest import random_array

LIGHT = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])


def _scene_mosaic(size, k, phase=0.6, kind="random", seed=0):
    scene = make_scene("sphere", size, seed)
    diffuse, specular = render_layers(scene, LIGHT)
    array = generate_pattern(PatternSpec(kind=kind, k=k, seed=seed, height=size, width=size))
    y = mosaic_capture(diffuse, specular, array, CaptureConfig(phase=phase))
    return y, array, diffuse, specular


# --- DIFFERENCE OPERATORS ---

def test_constant_image_has_zero_gradient():
    g = grad(np.full((7, 5), 0.3))
    assert not g.dx.any() and not g.dy.any()


def test_ramp_gradient():
    w = 8
    u = np.tile(np.arange(w) / w, (4, 1))
    g = grad(u)
    np.testing.assert_allclose(g.dx[:, :-1], 1.0 / w, atol=1e-15)
    assert not g.dx[:, -1].any()
    assert not g.dy.any()


@pytest.mark.parametrize("shape", [(16, 16), (1, 9), (9, 1), (5, 6, 2)])
def test_div_is_negative_adjoint_of_grad(rng, shape):
    u = rng.normal(size=shape)
    g = GradientField(rng.normal(size=shape), rng.normal(size=shape))
    gu = grad(u)
    lhs = float(np.vdot(gu.dx, g.dx) + np.vdot(gu.dy, g.dy))
    rhs = -float(np.vdot(u, div(g)))
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_dense_gradient_matches_grad(rng):
    u = rng.normal(size=(5, 7))
    d = build_dense_gradient(5, 7)
    g = grad(u)
    np.testing.assert_allclose(d @ u.ravel(), np.concatenate([g.dx.ravel(), g.dy.ravel()]), atol=1e-14)


# --- SCALAR PENALTIES ---

def test_shrink_examples():
    assert shrink(0.5, 1.0) == 0.0
    assert shrink(2.0, 0.5) == pytest.approx(1.5)
    assert shrink(-2.0, 0.5) == pytest.approx(-1.5)
    np.testing.assert_allclose(shrink(np.array([-3.0, 0.1, 3.0]), np.array([1.0, 1.0, 2.0])), [-2.0, 0.0, 1.0])


def test_shrink_beats_brute_force_grid(rng):
    grid = np.linspace(-4.0, 4.0, 10_000)
    for _ in range(100):
        v = rng.uniform(-3, 3)
        gamma = rng.uniform(0.01, 2.0)
        lam = rng.uniform(0.05, 2.0)

        def objective(d):
            return gamma * np.abs(d) + lam * (d - v) ** 2

        best = shrink(v, gamma / (2 * lam))
        assert objective(best) <= objective(grid).min() + 1e-12


def test_huber_values():
    assert huber_value(0.0, 0.3) == 0.0 and huber_grad(0.0, 0.3) == 0.0
    assert huber_value(2.0, 1.0) == pytest.approx(1.5)
    assert huber_value(0.5, 1.0) == pytest.approx(0.125)
    # continuous at the transition
    assert huber_value(0.3 - 1e-12, 0.3) == pytest.approx(huber_value(0.3 + 1e-12, 0.3), abs=1e-10)


@pytest.mark.parametrize("delta", [0.05, 1.0])
def test_huber_grad_matches_finite_differences(delta):
    xs = np.linspace(-3 * delta, 3 * delta, 601)
    h = 1e-7 * delta
    numeric = (huber_value(xs + h, delta) - huber_value(xs - h, delta)) / (2 * h)
    np.testing.assert_allclose(huber_grad(xs, delta), numeric, atol=1e-6)


# --- L2 SYSTEM ---

def test_system_operator_is_symmetric_positive_definite(rng, small_array):
    apply = l2_system_operator(small_array, 0.7, SolverConfig())
    for _ in range(5):
        u, v = rng.normal(size=(2, 12, 10, 2))
        lhs, rhs = float(np.vdot(apply(u), v)), float(np.vdot(u, apply(v)))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)
        assert float(np.vdot(u, apply(u))) > 0.0


def test_l2_matches_dense_direct_solve(rng, tight_solver):
    h = w = 16
    n = h * w
    for _ in range(3):
        array = random_array(rng, h, w, int(rng.integers(2, 9)))
        phase = float(rng.uniform(0, math.pi))
        y = rng.uniform(size=(h, w))
        s = build_dense_operator(array, phase)
        dtd = build_dense_gradient(h, w).T @ build_dense_gradient(h, w)
        system = s.T @ s
        system[:n, :n] += tight_solver.gamma_d * dtd
        system[n:, n:] += tight_solver.gamma_s * dtd
        z = np.linalg.solve(system, s.T @ y.ravel())

        result = separate_l2(y, array, phase, tight_solver)
        fast = np.concatenate([result.diffuse[..., 0].ravel(), result.specular[..., 0].ravel()])
        assert np.linalg.norm(fast - z) / np.linalg.norm(z) < 1e-6
        assert result.converged and result.final_residual < tight_solver.cg_tol


def test_l2_normal_equation_residual(small_array, rng):
    cfg = SolverConfig()
    y = rng.uniform(size=(12, 10))
    result = separate_l2(y, small_array, 0.2, cfg)
    z = np.stack([result.diffuse[..., 0], result.specular[..., 0]], axis=-1)
    rhs = np.stack([0.5 * y, np.cos(0.2 - small_array.orientations.as_array()[small_array.orientation_index]) ** 2 * y], axis=-1)
    r = rhs - l2_system_operator(small_array, 0.2, cfg)(z)
    assert np.linalg.norm(r) / np.linalg.norm(rhs) < 10 * cfg.cg_tol


def test_l2_objective_trace(small_array, rng):
    cfg = SolverConfig()
    y = rng.uniform(size=(12, 10))
    result = separate_l2(y, small_array, 0.2, cfg)
    trace = np.asarray(result.objective_trace)
    assert np.all(np.diff(trace) <= 1e-12 * trace[0])
    z = np.stack([result.diffuse[..., 0], result.specular[..., 0]], axis=-1)
    assert trace[-1] == pytest.approx(l2_objective(z, y, small_array, 0.2, cfg), rel=1e-6)


@pytest.mark.parametrize("solver, norm", [(separate_l2, "l2"), (separate_l1, "l1")])
def test_constant_diffuse_scene_is_recovered(solver, norm):
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=1, height=16, width=16))
    diffuse = np.full((16, 16), 0.5)
    y = mosaic_capture(diffuse, np.zeros_like(diffuse), array, CaptureConfig(phase=0.3))
    result = solver(y, array, 0.3, SolverConfig(norm=norm))
    assert np.abs(result.specular).max() < 1e-3
    assert np.abs(result.diffuse[..., 0] - diffuse).max() < 1e-3


def test_non_convergence_is_flagged_not_raised(small_array, rng):
    result = separate_l2(rng.uniform(size=(12, 10)), small_array, 0.2, SolverConfig(cg_max_iter=1))
    assert not result.converged
    assert "cg_max_iter" in result.flags
    assert result.iterations == 1


def test_shape_mismatch_rejected(small_array):
    with pytest.raises(ShapeError):
        separate_l2(np.zeros((5, 5)), small_array, 0.0, SolverConfig())


@pytest.mark.parametrize("norm", ["l2", "l1", "huber", "two_stage"])
def test_every_solver_keeps_dimensions_and_channels(norm, rng):
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=2, height=10, width=9))
    y = rng.uniform(size=(10, 9, 3))
    result = separate(y, array, 0.5, SolverConfig(norm=norm, outer_max_iter=5))
    assert result.diffuse.shape == result.specular.shape == (10, 9, 3)
    assert np.isfinite(result.diffuse).all() and np.isfinite(result.specular).all()
    assert result.solver == norm


@pytest.mark.parametrize("solver, norm", [
    (separate_l2, "l1"), (separate_l1, "l2"), (separate_huber, "two_stage"), (separate_two_stage, "huber"),
])
def test_solver_rejects_config_for_another_norm(solver, norm, small_array):
    with pytest.raises(ValidationError, match=norm):
        solver(np.zeros((12, 10)), small_array, 0.0, SolverConfig(norm=norm))


def test_dense_gradient_size_guard():
    with pytest.raises(OperatorSizeError):
        build_dense_gradient(65, 64)


def test_channels_are_independent(rng):
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=2, height=10, width=9))
    y = rng.uniform(size=(10, 9, 3))
    joint = separate_l2(y, array, 0.5, SolverConfig(cg_tol=1e-12))
    single = separate_l2(y[..., 1], array, 0.5, SolverConfig(cg_tol=1e-12))
    np.testing.assert_allclose(joint.diffuse[..., 1], single.diffuse[..., 0], atol=1e-12)


# --- SPLIT BREGMAN ---

def test_bregman_constraint_residual_decreases():
    y, array, _, _ = _scene_mosaic(32, 8)
    cfg = SolverConfig(norm="l1", outer_max_iter=10, outer_tol=1e-14)
    result = separate_l1(y, array, 0.6, cfg)
    trace = result.constraint_residual_trace
    assert len(trace) == 10
    assert trace[-1] < trace[0]
    assert "outer_max_iter" in result.flags


def test_l1_keeps_edges_at_least_as_sharp_as_l2():
    size = 32
    diffuse = np.full((size, size), 0.2)
    diffuse[:, size // 2:] = 0.8
    array = generate_pattern(PatternSpec(kind="regular", k=4, height=size, width=size))
    y = mosaic_capture(diffuse, np.zeros_like(diffuse), array, CaptureConfig(phase=0.3))

    def edge_width(estimate):
        band = 0.1 * 0.6
        inside = (estimate > 0.2 + band) & (estimate < 0.8 - band)
        return inside.sum(axis=1).mean()

    l2 = separate_l2(y, array, 0.3, SolverConfig())
    l1 = separate_l1(y, array, 0.3, SolverConfig(norm="l1"))
    assert edge_width(l1.diffuse[..., 0]) <= edge_width(l2.diffuse[..., 0])


# --- HUBER ---

def test_huber_gradient_matches_finite_differences(rng):
    array = random_array(rng, 8, 8, 4)
    cfg = SolverConfig(norm="huber")
    for _ in range(3):
        phase = float(rng.uniform(0, math.pi))
        y = rng.uniform(size=(8, 8))
        z = rng.uniform(size=(8, 8, 2))
        analytic = huber_gradient(z, y, array, phase, cfg)
        numeric = np.zeros_like(z)
        eps = 1e-6
        for idx in np.ndindex(z.shape):
            step = np.zeros_like(z)
            step[idx] = eps
            numeric[idx] = (huber_objective(z + step, y, array, phase, cfg)
                            - huber_objective(z - step, y, array, phase, cfg)) / (2 * eps)
        assert np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic) < 1e-5


def test_newton_objective_strictly_decreases():
    y, array, _, _ = _scene_mosaic(32, 8)
    result = separate_huber(y, array, 0.6, SolverConfig(norm="huber"))
    trace = np.asarray(result.objective_trace)
    assert trace.size >= 2
    assert np.all(np.diff(trace) < 0)


def test_huber_with_huge_delta_equals_l2(rng):
    array = random_array(rng, 32, 32, 8)
    y = rng.uniform(size=(32, 32))
    l2 = separate_l2(y, array, 1.0, SolverConfig(cg_tol=1e-10))
    huber = separate_huber(y, array, 1.0, SolverConfig(norm="huber", huber_delta=1e3, cg_tol=1e-10))
    for a, b in ((huber.diffuse, l2.diffuse), (huber.specular, l2.specular)):
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-4


# --- TWO-STAGE ---

def test_cosine_fit_recovers_full_sampling(rng):
    orientations = OrientationSet(angles=tuple(j * math.pi / 6 for j in range(6)))
    z_d, z_s = rng.uniform(size=(2, 9, 7, 3))
    stack = render_orientation_stack(z_d, z_s, orientations, 0.8)
    diffuse, specular = fit_cosine_stack(stack, orientations, 0.8)
    np.testing.assert_allclose(diffuse, z_d, atol=1e-10)
    np.testing.assert_allclose(specular, z_s, atol=1e-10)


def test_cosine_fit_matches_per_pixel_normal_equations(rng):
    orientations = OrientationSet(angles=(0.0, 0.5, 1.4, 2.0))
    stack = rng.uniform(size=(4, 3, 4))
    diffuse, specular = fit_cosine_stack(stack, orientations, 0.3)
    att = np.cos(0.3 - np.asarray(orientations.angles)) ** 2
    a = np.column_stack([np.full(4, 0.5), att])
    for i, j in np.ndindex(4, 3):
        expected = np.linalg.solve(a.T @ a, a.T @ stack[i, j])
        np.testing.assert_allclose([diffuse[i, j, 0], specular[i, j, 0]], expected, atol=1e-12)


def test_cosine_fit_singular_design():
    orientations = OrientationSet(angles=(0.0, math.pi / 2))
    with pytest.raises(SingularSystemError):
        fit_cosine_stack(np.ones((2, 2, 2)), orientations, math.pi / 4)


def test_two_stage_needs_every_orientation():
    array = FilterArray(orientation_index=np.zeros((6, 6), dtype=int),
                        orientations=OrientationSet(angles=(0.0, 1.0)))
    with pytest.raises(PatternError):
        separate_two_stage(np.ones((6, 6)), array, 0.0, SolverConfig(norm="two_stage"))


def test_two_stage_on_constant_scene():
    array = generate_pattern(PatternSpec(kind="regular", k=4, height=16, width=16))
    z_d, z_s = np.full((16, 16), 0.4), np.full((16, 16), 0.2)
    y = mosaic_capture(z_d, z_s, array, CaptureConfig(phase=0.5))
    result = separate_two_stage(y, array, 0.5, SolverConfig(norm="two_stage", cg_tol=1e-12))
    np.testing.assert_allclose(result.diffuse[..., 0], z_d, atol=1e-6)
    np.testing.assert_allclose(result.specular[..., 0], z_s, atol=1e-6)
