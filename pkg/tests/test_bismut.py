"""Tangent-space calculus and path observables."""

import numpy as np
import pytest

from itopath.bismut import (
    BismutField,
    BismutFieldTerm,
    BismutVector,
    bismut_inner,
    bismut_to_cm,
    damped_differentiate,
    damped_integrate,
    project_cm_to_bismut,
)
from itopath.functionals import (
    PathObservable,
    endpoint_component,
    endpoint_inner,
    endpoint_inner_squared,
    two_time_product,
)
from itopath.geometry import Sphere
from itopath.ito_map import solve_paths, solve_sde
from itopath.wiener import (
    CameronMartinVector,
    TimeGrid,
    check_gradient,
    constant_direction,
    h_inner,
    member_rng,
    sample_noise,
)

SEEDS = [0, 1, 2]


def _bundle(seed, n_paths=4, steps=40, horizon=0.5):
    manifold = Sphere(2)
    grid = TimeGrid(horizon, steps)
    omega = sample_noise(seed, grid, m=3, n_paths=n_paths)
    return solve_sde(manifold, omega, manifold.default_start())


# -- path observables -----------------------------------------------------------


def test_endpoint_inner_values_and_gradient():
    bundle = _bundle(1)
    a = np.array([0.4, -1.0, 0.7])
    N = bundle.noise.grid.steps
    f = endpoint_inner(N, a)
    assert np.allclose(f.value(bundle.noise, bundle), bundle.path[:, -1] @ a)
    vals = bundle.path[0][list(f.times), :]
    assert check_gradient(f, vals) < 1e-8


def test_endpoint_component_matches_inner():
    bundle = _bundle(2)
    N = bundle.noise.grid.steps
    f = endpoint_component(N, 2)
    g = endpoint_inner(N, np.array([0.0, 0.0, 1.0]))
    assert np.allclose(f.value(bundle.noise, bundle), g.value(bundle.noise, bundle))


def test_endpoint_inner_squared_gradient():
    bundle = _bundle(3)
    N = bundle.noise.grid.steps
    f = endpoint_inner_squared(N, np.array([1.0, 0.5, -0.2]))
    vals = bundle.path[0][list(f.times), :]
    assert check_gradient(f, vals) < 1e-7


def test_two_time_product_reads_two_slices():
    bundle = _bundle(4)
    N = bundle.noise.grid.steps
    v = np.array([0.3, 0.3, 0.9])
    f = two_time_product(N // 2, N, v)
    want = (bundle.path[:, N // 2] @ v) * (bundle.path[:, N] @ v)
    assert np.allclose(f.value(bundle.noise, bundle), want)
    vals = bundle.path[0][list(f.times), :]
    assert check_gradient(f, vals) < 1e-7


@pytest.mark.parametrize("seed", SEEDS)
def test_pathwise_derivative_matches_h_derivative(seed):
    # the two derivative routes agree when the tangent path is the exact
    # variational derivative of the solution along h
    from itopath.ito_map import solution_derivative

    bundle = _bundle(seed)
    grid = bundle.noise.grid
    rng = member_rng(seed, 9)
    hderiv = rng.normal(size=(grid.steps, 3))
    tangent = solution_derivative(
        bundle.manifold, bundle.path, bundle.noise.increments, hderiv * grid.dt
    )
    N = grid.steps
    f = endpoint_inner_squared(N, np.array([0.2, -0.8, 0.4]))
    direct = f.h_derivative(bundle.noise, bundle, np.broadcast_to(hderiv, bundle.noise.increments.shape))
    chained = f.pathwise_derivative(bundle, tangent)
    assert np.allclose(direct, chained, atol=1e-10)


def test_path_observable_times_validated():
    with pytest.raises(ValueError):
        PathObservable((), lambda p: p.sum(), lambda p: np.ones_like(p))


# -- damped tangent representation ----------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_damped_integrate_differentiate_roundtrip(seed):
    bundle = _bundle(seed)
    grid = bundle.noise.grid
    rng = member_rng(seed, 11)
    deriv = rng.normal(size=(4, grid.steps, 3))
    # derivative entries must be tangent along the base path for the
    # representation to be faithful; project them first
    deriv = bundle.manifold.tangent_project(bundle.path[:, :-1, :], deriv)
    values = damped_integrate(bundle, deriv)
    back = damped_differentiate(bundle, values)
    assert np.allclose(back, deriv, atol=1e-9)
    assert np.allclose(values[:, 0], 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_right_inverse_roundtrip(seed):
    bundle = _bundle(seed)
    grid = bundle.noise.grid
    rng = member_rng(seed, 12)
    h = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    v = project_cm_to_bismut(bundle, h)
    h_back = bismut_to_cm(bundle, v)
    v_back = project_cm_to_bismut(bundle, h_back)
    assert np.max(np.abs(v_back.values - v.values)) < 1e-10
    assert np.max(np.abs(v_back.damped_deriv - v.damped_deriv)) < 1e-10


@pytest.mark.parametrize("seed", SEEDS)
def test_right_inverse_reproduces_diffusion_image(seed):
    # the recovered direction maps back through X(x) to the damped derivative
    bundle = _bundle(seed)
    grid = bundle.noise.grid
    rng = member_rng(seed, 13)
    h = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    v = project_cm_to_bismut(bundle, h)
    h2 = bismut_to_cm(bundle, v)
    x_left = bundle.path[:, :-1, :]
    image = bundle.manifold.diffusion_apply(x_left, h2.deriv)
    assert np.max(np.abs(image - v.damped_deriv)) < 1e-10


def test_projection_kills_kernel_component():
    # adding a kernel-valued derivative to h leaves the projection unchanged
    bundle = _bundle(7)
    grid = bundle.noise.grid
    rng = member_rng(7, 14)
    h = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    v = project_cm_to_bismut(bundle, h)
    x_left = bundle.path[:, :-1, :]
    kernel_part = rng.normal(size=(4, grid.steps, 3))
    kernel_part = kernel_part - bundle.manifold.diffusion_apply(x_left, kernel_part)
    h_shift = CameronMartinVector(grid, h.deriv + kernel_part)
    v_shift = project_cm_to_bismut(bundle, h_shift)
    assert np.allclose(v_shift.values, v.values, atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_bismut_inner_energy_identity(seed):
    # for projected directions the energy is the integral of |X(x) hdot|^2
    bundle = _bundle(seed)
    grid = bundle.noise.grid
    rng = member_rng(seed, 15)
    h = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    v = project_cm_to_bismut(bundle, h)
    x_left = bundle.path[:, :-1, :]
    image = bundle.manifold.diffusion_apply(x_left, np.broadcast_to(h.deriv, (4, grid.steps, 3)))
    want = np.sum(image * image, axis=(-2, -1)) * grid.dt
    assert np.allclose(bismut_inner(v, v), want, atol=1e-10)


def test_bismut_inner_bilinear_symmetric():
    bundle = _bundle(8)
    grid = bundle.noise.grid
    rng = member_rng(8, 16)
    h1 = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    h2 = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    v1 = project_cm_to_bismut(bundle, h1)
    v2 = project_cm_to_bismut(bundle, h2)
    s = BismutVector(bundle, v1.values + 2.0 * v2.values,
                     v1.damped_deriv + 2.0 * v2.damped_deriv)
    assert np.allclose(bismut_inner(v1, v2), bismut_inner(v2, v1), atol=1e-12)
    assert np.allclose(
        bismut_inner(s, v1),
        bismut_inner(v1, v1) + 2.0 * bismut_inner(v2, v1),
        atol=1e-10,
    )


def test_flat_projection_recovers_h():
    # in flat space the projection is the identity on directions
    from itopath.geometry import FlatSpace

    manifold = FlatSpace(3)
    grid = TimeGrid(1.0, 25)
    omega = sample_noise(17, grid, m=3, n_paths=2)
    bundle = solve_sde(manifold, omega, np.zeros(3))
    rng = member_rng(17, 1)
    h = CameronMartinVector(grid, rng.normal(size=(grid.steps, 3)))
    v = project_cm_to_bismut(bundle, h)
    assert np.allclose(v.values[:, 1:], np.cumsum(h.deriv * grid.dt, axis=0), atol=1e-12)
    assert np.allclose(bismut_inner(v, v), h_inner(h, h), atol=1e-12)
    h_back = bismut_to_cm(bundle, v)
    assert np.allclose(h_back.deriv, np.broadcast_to(h.deriv, (2, 25, 3)), atol=1e-12)


# -- tangent-valued fields -------------------------------------------------------


def test_bismut_field_deterministic_term():
    bundle = _bundle(9)
    grid = bundle.noise.grid
    h = constant_direction(grid, np.array([1.0, 0.0, -1.0]))
    V = BismutField([BismutFieldTerm(h)])
    realized = V.evaluate(bundle)
    want = project_cm_to_bismut(bundle, h)
    assert np.allclose(realized.values, want.values, atol=1e-12)

    pulled = V.pullback()
    x_left = bundle.path[:, :-1, :]
    u = pulled.direction_deriv(bundle.noise, bundle)
    manual = bundle.manifold.kernel_complement_apply(
        x_left, np.broadcast_to(h.deriv, (4, grid.steps, 3)))
    assert np.allclose(u, manual, atol=1e-12)


def test_bismut_field_coefficient_scales_term():
    bundle = _bundle(10)
    grid = bundle.noise.grid
    N = grid.steps
    g = endpoint_inner(N, np.array([0.5, 0.5, 0.0]))
    h = constant_direction(grid, np.array([0.0, 1.0, 0.0]))
    V = BismutField([BismutFieldTerm(h, coefficient=g)])
    realized = V.evaluate(bundle)
    base = project_cm_to_bismut(bundle, h)
    gv = g.value(bundle.noise, bundle)
    assert np.allclose(realized.values, gv[:, None, None] * base.values, atol=1e-12)


def test_bismut_field_empty_pullback_raises():
    V = BismutField([])
    with pytest.raises(ValueError):
        V.pullback()
