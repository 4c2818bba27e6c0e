"""Solution map of the manifold SDE dx = X(x) o dB and its pathwise calculus.

The solver is a Stratonovich Heun predictor-corrector with retraction; an
Ito-Euler variant with the drift correction is kept as a weak cross-check.
On top of the solved path this module builds parallel-transport frames,
damped transport frames (transport corrected by -Ric/2), the exact
directional derivative of the discrete solution map (forward, for
Cameron-Martin perturbations of the noise), and its adjoint (reverse, for
gradients of path observables with respect to the increments).

All engines are batched: a state is an array (..., m) and a path (..., N+1, m).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import EmbeddedManifold
from .wiener import CameronMartinVector, NoisePath


@dataclass
class SolutionBundle:
    """One realized evaluation of the solution map, with lazy frame data.

    path has shape (..., N+1, m) matching noise.increments (..., N, m);
    frames and damped_frames, once computed, are (..., N+1, m, n): columns are
    the images of an initial orthonormal tangent frame at x0.  The transport
    operator over step i is tau_i = frames[i+1] @ frames[i]^T.
    """

    manifold: EmbeddedManifold
    noise: NoisePath
    path: np.ndarray
    frames: Optional[np.ndarray] = None
    damped_frames: Optional[np.ndarray] = None

    @property
    def x0(self) -> np.ndarray:
        return self.path[..., 0, :]

    def ensure_frames(self) -> np.ndarray:
        if self.frames is None:
            self.frames = transport_frames(self.manifold, self.path)
        return self.frames

    def ensure_damped(self) -> np.ndarray:
        if self.damped_frames is None:
            self.damped_frames = damped_frames(
                self.manifold, self.path, self.ensure_frames(), self.noise.grid.dt
            )
        return self.damped_frames


def heun_step(manifold: EmbeddedManifold, x: np.ndarray, db: np.ndarray) -> np.ndarray:
    """One Stratonovich predictor-corrector step with retraction."""
    a1 = manifold.diffusion_apply(x, db)
    xstar = manifold.retract(x, a1)
    a2 = 0.5 * (a1 + manifold.diffusion_apply(xstar, db))
    return manifold.retract(x, a2)


def solve_paths(manifold: EmbeddedManifold, x0: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """Heun solution path from x0 for each increment sequence, (..., N+1, m)."""
    n_steps = increments.shape[-2]
    batch = np.broadcast_shapes(x0.shape[:-1], increments.shape[:-2])
    path = np.empty(batch + (n_steps + 1, x0.shape[-1]))
    x = np.broadcast_to(x0, batch + (x0.shape[-1],)).copy()
    path[..., 0, :] = x
    for i in range(n_steps):
        x = heun_step(manifold, x, increments[..., i, :])
        path[..., i + 1, :] = x
    return path


def solve_paths_ito(
    manifold: EmbeddedManifold, x0: np.ndarray, increments: np.ndarray, dt: float
) -> np.ndarray:
    """Euler-Maruyama on the Ito form with drift correction, plus retraction.

    Weakly consistent with the same law as `solve_paths`; kept as an
    independent scheme for cross-checking marginals.
    """
    n_steps = increments.shape[-2]
    batch = np.broadcast_shapes(x0.shape[:-1], increments.shape[:-2])
    path = np.empty(batch + (n_steps + 1, x0.shape[-1]))
    x = np.broadcast_to(x0, batch + (x0.shape[-1],)).copy()
    path[..., 0, :] = x
    for i in range(n_steps):
        step = manifold.diffusion_apply(x, increments[..., i, :]) + dt * manifold.ito_drift(x)
        x = manifold.retract(x, step)
        path[..., i + 1, :] = x
    return path


def solve_sde(manifold: EmbeddedManifold, omega: NoisePath, x0: np.ndarray) -> SolutionBundle:
    """Solve the SDE from x0 driven by omega; frames are filled lazily."""
    manifold.require_point(x0)
    path = solve_paths(manifold, x0, omega.increments)
    return SolutionBundle(manifold=manifold, noise=omega, path=path)


def _loewdin(g: np.ndarray) -> np.ndarray:
    """Symmetric orthonormalization of near-orthonormal columns, (..., m, n)."""
    s = np.einsum("...ma,...mb->...ab", g, g)
    eigval, eigvec = np.linalg.eigh(s)
    if np.min(eigval) < 1e-6:
        raise ValueError("frame lost rank during transport (step too large)")
    inv_sqrt = np.einsum(
        "...ab,...b,...cb->...ac", eigvec, 1.0 / np.sqrt(eigval), eigvec
    )
    return np.einsum("...ma,...ab->...mb", g, inv_sqrt)


def transport_frames(manifold: EmbeddedManifold, path: np.ndarray) -> np.ndarray:
    """Parallel transport of an initial tangent frame along the path.

    Each step projects the previous frame to the new tangent space and
    re-orthonormalizes symmetrically (the orthonormal factor of the polar
    decomposition), which keeps the frames exactly orthonormal.
    """
    n_steps = path.shape[-2] - 1
    frames = np.empty(path.shape + (manifold.dim,))
    frames[..., 0, :, :] = manifold.tangent_frame(path[..., 0, :])
    for i in range(n_steps):
        x_next = path[..., i + 1, :]
        projected = manifold.tangent_project(
            x_next[..., None, :], np.moveaxis(frames[..., i, :, :], -1, -2)
        )
        frames[..., i + 1, :, :] = _loewdin(np.moveaxis(projected, -1, -2))
    return frames


def damped_frames(
    manifold: EmbeddedManifold, path: np.ndarray, frames: np.ndarray, dt: float
) -> np.ndarray:
    """Transport frames damped by the Ricci term: one explicit Euler factor per step.

    W_{i+1} = tau_i W_i - (dt/2) Ric(tau_i W_i), W_0 = frames[0].  The damped
    frames are not re-orthonormalized: decay is the point.
    """
    n_steps = path.shape[-2] - 1
    out = np.empty_like(frames)
    out[..., 0, :, :] = frames[..., 0, :, :]
    for i in range(n_steps):
        f_prev = frames[..., i, :, :]
        f_next = frames[..., i + 1, :, :]
        coords = np.einsum("...ma,...mb->...ab", f_prev, out[..., i, :, :])
        moved = np.einsum("...ma,...ab->...mb", f_next, coords)
        x_next = path[..., i + 1, :]
        ric = np.stack(
            [
                manifold.ricci_apply(x_next, moved[..., :, a])
                for a in range(manifold.dim)
            ],
            axis=-1,
        )
        out[..., i + 1, :, :] = moved - 0.5 * dt * ric
    return out


def parallel_transport(manifold: EmbeddedManifold, bundle: SolutionBundle) -> np.ndarray:
    """Fill and return transport frames on the bundle."""
    if bundle.manifold is not manifold:
        raise ValueError("bundle was built for a different manifold")
    return bundle.ensure_frames()


def damped_transport(manifold: EmbeddedManifold, bundle: SolutionBundle) -> np.ndarray:
    """Fill and return damped transport frames on the bundle."""
    if bundle.manifold is not manifold:
        raise ValueError("bundle was built for a different manifold")
    return bundle.ensure_damped()


def frame_gram_defect(frames: np.ndarray) -> float:
    """Max over steps of the frame Gram defect ||F^T F - I||_max."""
    n = frames.shape[-1]
    gram = np.einsum("...ma,...mb->...ab", frames, frames)
    return float(np.max(np.abs(gram - np.eye(n))))


def _step_derivative(
    manifold: EmbeddedManifold,
    x: np.ndarray,
    db: np.ndarray,
    v: np.ndarray,
    db_dot: np.ndarray,
) -> np.ndarray:
    """Exact differential of the Heun step in directions (v, db_dot)."""
    a1 = manifold.diffusion_apply(x, db)
    xstar = manifold.retract(x, a1)
    da1 = manifold.diffusion_deriv(x, v, db) + manifold.diffusion_apply(x, db_dot)
    dxstar = manifold.retract_deriv(x, a1, v, da1)
    a2 = 0.5 * (a1 + manifold.diffusion_apply(xstar, db))
    da2 = 0.5 * (
        da1
        + manifold.diffusion_deriv(xstar, dxstar, db)
        + manifold.diffusion_apply(xstar, db_dot)
    )
    return manifold.retract_deriv(x, a2, v, da2)


def solution_derivative(
    manifold: EmbeddedManifold,
    path: np.ndarray,
    increments: np.ndarray,
    increment_deriv: np.ndarray,
) -> np.ndarray:
    """Derivative of the solution path along a noise perturbation.

    increment_deriv (..., N, m) is the derivative of each increment: the
    perturbed noise has increments dB_i + eps * increment_deriv_i.  For a
    Cameron-Martin direction h this is hdot_i * dt.  Returns tangent vectors
    (..., N+1, m) with v_0 = 0, each projected to the tangent space of its
    base point (the projection is a no-op up to roundoff; kept as a guard).
    """
    n_steps = increments.shape[-2]
    batch = np.broadcast_shapes(
        path.shape[:-2], increments.shape[:-2], increment_deriv.shape[:-2]
    )
    out = np.zeros(batch + (n_steps + 1, path.shape[-1]))
    v = np.zeros(batch + (path.shape[-1],))
    for i in range(n_steps):
        x = path[..., i, :]
        db = increments[..., i, :]
        v = _step_derivative(manifold, x, db, v, increment_deriv[..., i, :])
        v = manifold.tangent_project(path[..., i + 1, :], v)
        out[..., i + 1, :] = v
    return out


def derivative_of_ito_map(
    manifold: EmbeddedManifold, bundle: SolutionBundle, h: CameronMartinVector
) -> np.ndarray:
    """Pathwise derivative of the solution map in direction h, (..., N+1, m).

    The perturbation of increment i is h.deriv[i] * dt, matching a noise path
    shifted by h.
    """
    h_deriv = h.deriv * bundle.noise.grid.dt
    h_deriv = np.broadcast_to(h_deriv, bundle.noise.increments.shape)
    return solution_derivative(manifold, bundle.path, bundle.noise.increments, h_deriv)


def solution_gradient(
    manifold: EmbeddedManifold,
    path: np.ndarray,
    increments: np.ndarray,
    cotangents: dict,
) -> np.ndarray:
    """Adjoint sweep: gradient of sum_j <lambda_j, x_{t_j}> w.r.t. increments.

    cotangents maps grid indices t_j to arrays (..., m); the returned array G
    (..., N, m) satisfies d(observable)(h) = sum_i <G_i, h_i> for increment
    perturbations h_i, i.e. G/1 is the gradient in increment coordinates.
    """
    n_steps = increments.shape[-2]
    m = path.shape[-1]
    for t in cotangents:
        if not 0 <= t <= n_steps:
            raise ValueError("cotangent index outside the grid")
    batch = np.broadcast_shapes(
        path.shape[:-2],
        increments.shape[:-2],
        *(lam.shape[:-1] for lam in cotangents.values()),
    )
    grad = np.zeros(batch + (n_steps, m))
    lam = np.zeros(batch + (m,))
    if n_steps in cotangents:
        lam = lam + manifold.tangent_project(path[..., n_steps, :], cotangents[n_steps])
    for i in range(n_steps - 1, -1, -1):
        x = path[..., i, :]
        db = increments[..., i, :]
        a1 = manifold.diffusion_apply(x, db)
        xstar = manifold.retract(x, a1)
        a2 = 0.5 * (a1 + manifold.diffusion_apply(xstar, db))
        # x_{i+1} = retract(x, a2): pull the cotangent through the retraction
        mu_x, mu_a2 = manifold.retract_deriv_adjoint(x, a2, lam)
        nu1 = 0.5 * mu_a2
        xi_star = 0.5 * manifold.diffusion_deriv_adjoint(xstar, db, mu_a2)
        g_direct = 0.5 * manifold.diffusion_apply(xstar, mu_a2)
        # xstar = retract(x, a1)
        mu_x2, mu_a1 = manifold.retract_deriv_adjoint(x, a1, xi_star)
        nu1 = nu1 + mu_a1
        lam_new = mu_x + mu_x2 + manifold.diffusion_deriv_adjoint(x, db, nu1)
        grad[..., i, :] = manifold.diffusion_apply(x, nu1) + g_direct
        if i in cotangents:
            lam_new = lam_new + manifold.tangent_project(x, cotangents[i])
        lam = lam_new
    return grad
