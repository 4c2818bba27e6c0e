"""Pointwise geometry checks: projections, retraction, drift, curvature."""

import numpy as np
import pytest

from itopath.geometry import (
    ConstraintViolation,
    FlatSpace,
    Sphere,
    covariant_step_residual,
    make_manifold,
    ricci_finite_difference,
)

MANIFOLD_NAMES = ["sphere:2", "sphere:3", "flat:2", "flat:3"]
SPHERE_NAMES = ["sphere:2", "sphere:3", "sphere:5"]
SEEDS = [0, 1, 2]


def _random_point(manifold, rng):
    p = rng.normal(size=manifold.ambient_dim)
    return manifold.project(p)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_make_manifold_roundtrip(name):
    manifold = make_manifold(name)
    assert manifold.name == name
    assert manifold.ambient_dim >= manifold.dim


def test_make_manifold_rejects_unknown():
    with pytest.raises(ValueError):
        make_manifold("torus:2")
    with pytest.raises(ValueError):
        make_manifold("sphere:0")


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_project_idempotent(name, seed):
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    assert np.max(np.abs(manifold.constraint_defect(p))) < 1e-12
    assert np.allclose(manifold.project(p), p, atol=1e-12)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_tangent_project_is_projector(name, seed):
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    v = rng.normal(size=manifold.ambient_dim)
    pv = manifold.tangent_project(p, v)
    assert np.allclose(manifold.tangent_project(p, pv), pv, atol=1e-12)
    manifold.require_tangent(p, pv)


@pytest.mark.parametrize("name", SPHERE_NAMES)
def test_sphere_tangent_orthogonal_to_point(name):
    manifold = make_manifold(name)
    rng = np.random.default_rng(7)
    p = _random_point(manifold, rng)
    v = manifold.tangent_project(p, rng.normal(size=manifold.ambient_dim))
    assert abs(np.dot(p, v)) < 1e-12


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_retract_stays_on_manifold(name, seed):
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    v = manifold.tangent_project(p, 0.1 * rng.normal(size=manifold.ambient_dim))
    q = manifold.retract(p, v)
    assert np.max(np.abs(manifold.constraint_defect(q))) < 1e-12
    # zero step is the identity
    assert np.allclose(manifold.retract(p, np.zeros_like(p)), p, atol=1e-14)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_diffusion_matrix_is_tangent_projector(name):
    manifold = make_manifold(name)
    rng = np.random.default_rng(11)
    p = _random_point(manifold, rng)
    X = manifold.diffusion_matrix(p)
    assert np.allclose(X, X.T, atol=1e-12)
    assert np.allclose(X @ X, X, atol=1e-12)
    assert np.allclose(np.trace(X), manifold.dim, atol=1e-12)
    e = rng.normal(size=manifold.ambient_dim)
    assert np.allclose(manifold.diffusion_apply(p, e), X @ e, atol=1e-12)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_kernel_complement_split(name):
    # the kernel and its complement partition the ambient space
    manifold = make_manifold(name)
    rng = np.random.default_rng(13)
    p = _random_point(manifold, rng)
    K = manifold.kernel_matrix(p)
    Kc = manifold.kernel_complement_matrix(p)
    eye = np.eye(manifold.ambient_dim)
    assert np.allclose(K + Kc, eye, atol=1e-12)
    assert np.allclose(K @ Kc, 0.0, atol=1e-12)
    e = rng.normal(size=manifold.ambient_dim)
    recon = manifold.kernel_apply(p, e) + manifold.kernel_complement_apply(p, e)
    assert np.allclose(recon, e, atol=1e-12)


@pytest.mark.parametrize("name", SPHERE_NAMES)
def test_sphere_ito_drift_value(name):
    manifold = make_manifold(name)
    rng = np.random.default_rng(3)
    p = _random_point(manifold, rng)
    assert np.allclose(manifold.ito_drift(p), -0.5 * manifold.dim * p, atol=1e-12)


def test_flat_ito_drift_zero():
    manifold = FlatSpace(3)
    assert np.allclose(manifold.ito_drift(np.ones(3)), 0.0)


@pytest.mark.parametrize("name", SPHERE_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_ricci_matches_finite_difference(name, seed):
    # FD oracle returns Ric(E_a, E_b) in tangent-frame coordinates
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    v = manifold.tangent_project(p, rng.normal(size=manifold.ambient_dim))
    closed = manifold.ricci_apply(p, v)
    assert np.allclose(closed, (manifold.dim - 1) * v, atol=1e-12)
    fd = ricci_finite_difference(manifold, p)
    assert np.allclose(fd, (manifold.dim - 1) * np.eye(manifold.dim), atol=5e-3)


def test_flat_ricci_zero():
    manifold = FlatSpace(2)
    p = np.zeros(2)
    assert np.allclose(manifold.ricci_apply(p, np.ones(2)), 0.0)
    assert np.allclose(ricci_finite_difference(manifold, p), 0.0, atol=1e-8)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_covariant_step_residual_small(name, seed):
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    e = manifold.tangent_project(p, rng.normal(size=manifold.ambient_dim))
    assert covariant_step_residual(manifold, p, e) < 1e-6


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_right_inverse_of_diffusion(name):
    manifold = make_manifold(name)
    rng = np.random.default_rng(17)
    p = _random_point(manifold, rng)
    v = manifold.tangent_project(p, rng.normal(size=manifold.ambient_dim))
    e = manifold.diffusion_right_inverse(p, v)
    assert np.allclose(manifold.diffusion_apply(p, e), v, atol=1e-12)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_diffusion_deriv_matches_fd(name, seed):
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    u = manifold.tangent_project(p, rng.normal(size=manifold.ambient_dim))
    e = rng.normal(size=manifold.ambient_dim)
    eps = 1e-6
    up = manifold.diffusion_apply(manifold.project(p + eps * u), e)
    dn = manifold.diffusion_apply(manifold.project(p - eps * u), e)
    fd = (up - dn) / (2 * eps)
    assert np.allclose(manifold.diffusion_deriv(p, u, e), fd, atol=1e-6)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_diffusion_deriv_adjoint_pairing(name):
    # <dX(p)[u] e, lam> = <u, adjoint(p, e, lam)> for tangent u
    manifold = make_manifold(name)
    rng = np.random.default_rng(19)
    p = _random_point(manifold, rng)
    u = manifold.tangent_project(p, rng.normal(size=manifold.ambient_dim))
    e = rng.normal(size=manifold.ambient_dim)
    lam = rng.normal(size=manifold.ambient_dim)
    lhs = np.dot(manifold.diffusion_deriv(p, u, e), lam)
    rhs = np.dot(u, manifold.diffusion_deriv_adjoint(p, e, lam))
    assert abs(lhs - rhs) < 1e-12


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_retract_deriv_matches_fd(name, seed):
    manifold = make_manifold(name)
    rng = np.random.default_rng(seed)
    p = _random_point(manifold, rng)
    v = manifold.tangent_project(p, 0.05 * rng.normal(size=manifold.ambient_dim))
    u = rng.normal(size=manifold.ambient_dim)
    w = rng.normal(size=manifold.ambient_dim)
    eps = 1e-6
    up = manifold.retract(p + eps * u, v + eps * w)
    dn = manifold.retract(p - eps * u, v - eps * w)
    fd = (up - dn) / (2 * eps)
    assert np.allclose(manifold.retract_deriv(p, v, u, w), fd, atol=1e-6)


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_retract_deriv_adjoint_pairing(name):
    manifold = make_manifold(name)
    rng = np.random.default_rng(23)
    p = _random_point(manifold, rng)
    v = manifold.tangent_project(p, 0.05 * rng.normal(size=manifold.ambient_dim))
    u = rng.normal(size=manifold.ambient_dim)
    w = rng.normal(size=manifold.ambient_dim)
    mu = rng.normal(size=manifold.ambient_dim)
    mu_p, mu_v = manifold.retract_deriv_adjoint(p, v, mu)
    lhs = np.dot(manifold.retract_deriv(p, v, u, w), mu)
    rhs = np.dot(u, mu_p) + np.dot(w, mu_v)
    assert abs(lhs - rhs) < 1e-12


def test_require_point_raises():
    manifold = Sphere(2)
    with pytest.raises(ConstraintViolation):
        manifold.require_point(np.array([1.0, 1.0, 1.0]))
    with pytest.raises(ConstraintViolation):
        manifold.require_tangent(np.array([0.0, 0.0, 1.0]),
                                 np.array([0.0, 0.0, 0.5]))


@pytest.mark.parametrize("name", MANIFOLD_NAMES)
def test_default_start_is_valid_point(name):
    manifold = make_manifold(name)
    x0 = manifold.default_start()
    manifold.require_point(x0)
    assert x0.shape == (manifold.ambient_dim,)


def test_batched_operations_match_loop():
    # batched points broadcast through every pointwise operation
    manifold = Sphere(2)
    rng = np.random.default_rng(29)
    p = manifold.project(rng.normal(size=(5, 3)))
    e = rng.normal(size=(5, 3))
    batched = manifold.diffusion_apply(p, e)
    for i in range(5):
        assert np.allclose(batched[i], manifold.diffusion_apply(p[i], e[i]))
    batched = manifold.retract(p, manifold.tangent_project(p, 0.1 * e))
    for i in range(5):
        vi = manifold.tangent_project(p[i], 0.1 * e[i])
        assert np.allclose(batched[i], manifold.retract(p[i], vi))
