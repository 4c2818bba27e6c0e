"""Smooth observables of the solution path.

A PathObservable is the manifold-side analog of a cylindrical function: it
reads the solution at finitely many grid times through a smooth body.  Its
derivative along a noise direction runs the forward variational equation; its
full noise gradient runs the adjoint sweep.  Instances satisfy the same
coefficient protocol as flat cylindrical functions (value / h_derivative), so
they can appear as coefficients in H-vector fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ito_map import SolutionBundle, solution_derivative, solution_gradient
from .wiener import NoisePath


@dataclass
class PathObservable:
    """phi(x_{t_1}, ..., x_{t_k}) with an explicit ambient gradient.

    `body` maps stacked points (..., k, m) to scalars (...,); `body_grad`
    returns the ambient gradient with the same shape.  Gradients are projected
    to the tangent spaces where they are used, so body_grad may be any smooth
    ambient extension.
    """

    times: tuple
    body: Callable[[np.ndarray], np.ndarray]
    body_grad: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __post_init__(self):
        if not self.times:
            raise ValueError("observable must read at least one grid time")

    def value(self, omega: NoisePath, bundle: SolutionBundle) -> np.ndarray:
        return np.asarray(self.body(bundle.path[..., list(self.times), :]))

    def gradients(self, bundle: SolutionBundle) -> np.ndarray:
        return np.asarray(self.body_grad(bundle.path[..., list(self.times), :]))

    def h_derivative(self, omega: NoisePath, bundle: SolutionBundle, direction_deriv: np.ndarray) -> np.ndarray:
        """Directional derivative along a noise perturbation (chain rule).

        direction_deriv holds Cameron-Martin step derivatives (..., N, m); the
        induced increment perturbation is direction_deriv * dt.
        """
        v = solution_derivative(
            bundle.manifold,
            bundle.path,
            omega.increments,
            direction_deriv * omega.grid.dt,
        )
        grads = self.gradients(bundle)
        return np.sum(grads * v[..., list(self.times), :], axis=(-2, -1))

    def pathwise_derivative(self, bundle: SolutionBundle, tangent_path: np.ndarray) -> np.ndarray:
        """Derivative along a realized tangent field on path space."""
        grads = self.gradients(bundle)
        return np.sum(grads * tangent_path[..., list(self.times), :], axis=(-2, -1))

    def h_gradient(self, omega: NoisePath, bundle: SolutionBundle) -> np.ndarray:
        """Gradient with respect to the increments, shape (..., N, m).

        Pairing the result with increment perturbations reproduces
        h_derivative; this is the adjoint route to the same chain rule.
        """
        grads = self.gradients(bundle)
        cotangents = {
            t: grads[..., j, :] for j, t in enumerate(self.times)
        }
        return solution_gradient(bundle.manifold, bundle.path, omega.increments, cotangents)


def endpoint_component(grid_steps: int, axis: int, name: str = "") -> PathObservable:
    """phi(x_T) = x_T[axis]."""

    def body(pts):
        return pts[..., 0, axis]

    def grad(pts):
        g = np.zeros_like(pts)
        g[..., 0, axis] = 1.0
        return g

    return PathObservable((grid_steps,), body, grad, name or f"x_T[{axis}]")


def endpoint_inner(grid_steps: int, vector: np.ndarray, name: str = "") -> PathObservable:
    """phi(x_T) = <x_T, a>."""
    vector = np.asarray(vector, dtype=float)

    def body(pts):
        return np.sum(pts[..., 0, :] * vector, axis=-1)

    def grad(pts):
        return np.broadcast_to(vector, pts.shape).copy()

    return PathObservable((grid_steps,), body, grad, name or "endpoint inner")


def endpoint_inner_squared(grid_steps: int, vector: np.ndarray, name: str = "") -> PathObservable:
    """phi(x_T) = <x_T, a>^2, a genuinely nonlinear observable."""
    vector = np.asarray(vector, dtype=float)

    def body(pts):
        return np.sum(pts[..., 0, :] * vector, axis=-1) ** 2

    def grad(pts):
        inner = np.sum(pts[..., 0, :] * vector, axis=-1)
        return 2.0 * inner[..., None, None] * np.broadcast_to(vector, pts.shape)

    return PathObservable((grid_steps,), body, grad, name or "endpoint inner squared")


def two_time_product(t1: int, t2: int, vector: np.ndarray, name: str = "") -> PathObservable:
    """phi = <x_{t1}, a> * <x_{t2}, a>, couples two path times."""
    vector = np.asarray(vector, dtype=float)

    def body(pts):
        return np.sum(pts[..., 0, :] * vector, axis=-1) * np.sum(pts[..., 1, :] * vector, axis=-1)

    def grad(pts):
        u = np.sum(pts[..., 0, :] * vector, axis=-1)
        v = np.sum(pts[..., 1, :] * vector, axis=-1)
        g = np.empty_like(pts)
        g[..., 0, :] = v[..., None] * vector
        g[..., 1, :] = u[..., None] * vector
        return g

    return PathObservable((t1, t2), body, grad, name or "two time product")
