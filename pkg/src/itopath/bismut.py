"""Tangent-space calculus along a realized solution path.

The admissible tangent vectors along a path are stored through their damped
derivative: a BismutVector keeps both the pointwise values v_i and the step
field b_i that generates them under damped transport.  The energy metric, the
projection from flat noise directions, and its right inverse all read and
write b, which makes the right-inverse identity exact at the discrete level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ito_map import SolutionBundle
from .wiener import CameronMartinVector, FieldTerm, FlatField


@dataclass
class BismutVector:
    """Tangent field v along the bundle's path with damped derivative b.

    values: (..., N+1, m) with values[..., 0, :] = 0; damped_deriv: (..., N, m)
    with b_i tangent at x_i.  b is primary: stepping b through
    `damped_integrate` reproduces values exactly.
    """

    bundle: SolutionBundle
    values: np.ndarray
    damped_deriv: np.ndarray

    def check(self, tol: float = 1e-8) -> None:
        if np.max(np.abs(self.values[..., 0, :])) > tol:
            raise ValueError("Bismut vector must vanish at time zero")
        rebuilt = damped_integrate(self.bundle, self.damped_deriv)
        err = float(np.max(np.abs(rebuilt - self.values)))
        if err > tol:
            raise ValueError(f"values drift from damped stepping of b by {err:.2e}")


def _transport_step(frames: np.ndarray, i: int, vec: np.ndarray) -> np.ndarray:
    """Apply tau_i = F_{i+1} F_i^T to tangent vectors at x_i."""
    coords = np.einsum("...ma,...m->...a", frames[..., i, :, :], vec)
    return np.einsum("...ma,...a->...m", frames[..., i + 1, :, :], coords)


def _transport_step_back(frames: np.ndarray, i: int, vec: np.ndarray) -> np.ndarray:
    """Apply tau_i^{-1} = F_i F_{i+1}^T to tangent vectors at x_{i+1}."""
    coords = np.einsum("...ma,...m->...a", frames[..., i + 1, :, :], vec)
    return np.einsum("...ma,...a->...m", frames[..., i, :, :], coords)


def damped_integrate(bundle: SolutionBundle, damped_deriv: np.ndarray) -> np.ndarray:
    """Integrate v_0 = 0, v_{i+1} = tau_i v_i - (dt/2) Ric(tau_i v_i) + dt tau_i b_i."""
    manifold = bundle.manifold
    frames = bundle.ensure_frames()
    dt = bundle.noise.grid.dt
    n_steps = bundle.noise.grid.steps
    batch = np.broadcast_shapes(bundle.path.shape[:-2], damped_deriv.shape[:-2])
    out = np.zeros(batch + (n_steps + 1, bundle.path.shape[-1]))
    v = np.zeros(batch + (bundle.path.shape[-1],))
    for i in range(n_steps):
        moved = _transport_step(frames, i, v)
        x_next = bundle.path[..., i + 1, :]
        v = moved - 0.5 * dt * manifold.ricci_apply(x_next, moved) + dt * _transport_step(
            frames, i, damped_deriv[..., i, :]
        )
        out[..., i + 1, :] = v
    return out


def damped_differentiate(bundle: SolutionBundle, values: np.ndarray) -> np.ndarray:
    """Exact inverse of `damped_integrate`: recover b from a tangent field v."""
    manifold = bundle.manifold
    frames = bundle.ensure_frames()
    dt = bundle.noise.grid.dt
    n_steps = bundle.noise.grid.steps
    out = np.empty(values.shape[:-2] + (n_steps, values.shape[-1]))
    for i in range(n_steps):
        moved = _transport_step(frames, i, values[..., i, :])
        x_next = bundle.path[..., i + 1, :]
        homog = moved - 0.5 * dt * manifold.ricci_apply(x_next, moved)
        out[..., i, :] = _transport_step_back(frames, i, (values[..., i + 1, :] - homog) / dt)
    return out


def bismut_inner(v1: BismutVector, v2: BismutVector) -> np.ndarray:
    """Energy inner product sum_i <b1_i, b2_i> dt, batched over members."""
    if v1.bundle is not v2.bundle:
        raise ValueError("Bismut vectors live on different bundles")
    dt = v1.bundle.noise.grid.dt
    return np.sum(v1.damped_deriv * v2.damped_deriv, axis=(-2, -1)) * dt


def project_cm_to_bismut(bundle: SolutionBundle, h: CameronMartinVector) -> BismutVector:
    """Orthogonal projection of a flat direction h onto the path's tangent space.

    The damped derivative is b_i = X(x_i) hdot_i; v follows by damped stepping.
    """
    manifold = bundle.manifold
    x_left = bundle.path[..., :-1, :]
    b = manifold.diffusion_apply(x_left, h.deriv)
    return BismutVector(bundle, damped_integrate(bundle, b), b)


def bismut_to_cm(bundle: SolutionBundle, v: BismutVector) -> CameronMartinVector:
    """Right inverse: the flat direction with hdot_i = Y_{x_i}(b_i)."""
    if v.bundle is not bundle:
        raise ValueError("vector does not live on this bundle")
    manifold = bundle.manifold
    x_left = bundle.path[..., :-1, :]
    return CameronMartinVector(bundle.noise.grid, manifold.diffusion_right_inverse(x_left, v.damped_deriv))


@dataclass
class BismutFieldTerm:
    """One term g(path) * projection(h) of a vector field on path space.

    coefficient is None (meaning 1) or an object with value(omega, bundle)
    and h_derivative(omega, bundle, direction_deriv); it must be a function
    of the solution path only, so that conditioning leaves it fixed.
    """

    direction: CameronMartinVector
    coefficient: object = None
    name: str = ""


@dataclass
class BismutField:
    """H-vector field on path space in the supported span; regular by construction."""

    terms: list
    name: str = ""

    def evaluate(self, bundle: SolutionBundle) -> BismutVector:
        """Realize the field along one (possibly batched) solution bundle."""
        manifold = bundle.manifold
        x_left = bundle.path[..., :-1, :]
        total = None
        for term in self.terms:
            b = manifold.diffusion_apply(x_left, term.direction.deriv)
            if term.coefficient is not None:
                g = np.asarray(term.coefficient.value(bundle.noise, bundle))
                b = g[..., None, None] * b
            total = b if total is None else total + b
        if total is None:
            total = np.zeros_like(x_left)
        return BismutVector(bundle, damped_integrate(bundle, total), total)

    def pullback(self) -> FlatField:
        """Flat representative: the field omega -> Y(V(path(omega))).

        Each term g * projection(h) pulls back to g(path) times the adapted
        direction with step derivative Y X(x_i) hdot_i (the kernel-complement
        filtered hdot), which stays in the supported span of the flat
        divergence.
        """
        if not self.terms:
            raise ValueError("cannot pull back an empty field")
        terms = []
        for term in self.terms:

            def direction(omega, bundle, _h=term.direction):
                x_left = bundle.path[..., :-1, :]
                return bundle.manifold.kernel_complement_apply(x_left, _h.deriv)

            terms.append(FieldTerm(direction=direction, coefficient=term.coefficient, name=term.name))
        return FlatField(grid=self.terms[0].direction.grid, terms=terms, name=self.name)
