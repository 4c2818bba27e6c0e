"""Embedded Riemannian manifolds supplying SDE coefficients.

Points and tangent vectors are plain float64 arrays of length ``ambient_dim``;
all operations broadcast over leading batch axes.  A manifold provides the
diffusion field X(x) (the orthogonal projection onto the tangent space, as in
gradient systems built from an isometric embedding), its right inverse on
tangent vectors, the projectors onto ker X(x) and its complement, the Ricci
operator, and a retraction used by the time steppers.
"""

from __future__ import annotations

import numpy as np

POINT_TOL = 1e-10
TANGENT_TOL = 1e-10


class ConstraintViolation(ValueError):
    """A point is off the manifold beyond tolerance."""


class DegenerateStep(ValueError):
    """A retraction input has no well-defined image (e.g. x + v = 0 on a sphere)."""


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ambient inner product over the last axis, keepdims."""
    return np.sum(a * b, axis=-1, keepdims=True)


class EmbeddedManifold:
    """Base class; subclasses override the analytic operations they know.

    Finite-difference fallbacks are provided for the derivative of the
    diffusion field and of the retraction, so a subclass only has to supply
    `project`, `tangent_project` and `constraint_defect`.
    """

    ambient_dim: int
    dim: int
    name: str

    fd_step = 1e-5

    # -- constraint handling ------------------------------------------------

    def constraint_defect(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def require_point(self, p: np.ndarray) -> None:
        defect = np.max(np.abs(self.constraint_defect(p)))
        if defect > POINT_TOL:
            raise ConstraintViolation(
                f"point off {self.name} by {defect:.3e} (tol {POINT_TOL:.0e})"
            )

    def require_tangent(self, p: np.ndarray, v: np.ndarray) -> None:
        defect = np.max(np.abs(v - self.tangent_project(p, v)))
        if defect > TANGENT_TOL * max(1.0, float(np.max(np.abs(v)))):
            raise ConstraintViolation(
                f"vector has normal component {defect:.3e} at base point"
            )

    def project(self, p: np.ndarray) -> np.ndarray:
        """Nearest-point style projection of an ambient point onto M."""
        raise NotImplementedError

    def tangent_project(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection of v onto the tangent space at p."""
        raise NotImplementedError

    def default_start(self) -> np.ndarray:
        """Canonical start point used by experiments when none is given."""
        p = np.zeros(self.ambient_dim)
        p[-1] = 1.0
        return self.project(p)

    # -- diffusion coefficient and kernel structure -------------------------

    def diffusion_apply(self, p: np.ndarray, e: np.ndarray) -> np.ndarray:
        """X(p)e.  For gradient systems X(p) is the tangent projector."""
        return self.tangent_project(p, e)

    def diffusion_matrix(self, p: np.ndarray) -> np.ndarray:
        """Matrix of X(p), shape (..., m, m)."""
        self.require_point(p)
        m = self.ambient_dim
        basis = np.eye(m)
        cols = [self.diffusion_apply(p, np.broadcast_to(basis[j], p.shape)) for j in range(m)]
        return np.stack(cols, axis=-1)

    def diffusion_right_inverse(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Right inverse of X(p) on tangent vectors; the adjoint X(p)* here.

        For a projection-valued X this is the inclusion of the tangent space,
        implemented as a projection so that near-tangent input is cleaned.
        """
        return self.tangent_project(p, v)

    def kernel_apply(self, p: np.ndarray, e: np.ndarray) -> np.ndarray:
        """Projection of e onto ker X(p) (the noise directions X discards)."""
        return e - self.kernel_complement_apply(p, e)

    def kernel_complement_apply(self, p: np.ndarray, e: np.ndarray) -> np.ndarray:
        """Projection onto (ker X(p))^perp; equals X(p) for projection systems."""
        return self.tangent_project(p, e)

    def kernel_complement_matrix(self, p: np.ndarray) -> np.ndarray:
        self.require_point(p)
        m = self.ambient_dim
        basis = np.eye(m)
        cols = [
            self.kernel_complement_apply(p, np.broadcast_to(basis[j], p.shape))
            for j in range(m)
        ]
        return np.stack(cols, axis=-1)

    def kernel_matrix(self, p: np.ndarray) -> np.ndarray:
        eye = np.eye(self.ambient_dim)
        return eye - self.kernel_complement_matrix(p)

    # -- curvature ----------------------------------------------------------

    def ricci_apply(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Ricci operator on tangent vectors."""
        raise NotImplementedError

    # -- retraction and derivatives ------------------------------------------

    def retract(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Step from p by ambient displacement v, landing on M."""
        return self.project(p + v)

    def diffusion_deriv(self, p: np.ndarray, u: np.ndarray, e: np.ndarray) -> np.ndarray:
        """Directional derivative D_u[X(.)e](p) for tangent directions u.

        Fallback: central difference of X(.)e along the retraction curve
        through p with velocity u.
        """
        eps = self.fd_step
        xp = self.retract(p, eps * u)
        xm = self.retract(p, -eps * u)
        return (self.diffusion_apply(xp, e) - self.diffusion_apply(xm, e)) / (2.0 * eps)

    def diffusion_deriv_adjoint(self, p: np.ndarray, e: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Adjoint of u -> D_u[X(.)e](p) applied to lam, as a tangent vector."""
        frame = self.tangent_frame(p)
        out = np.zeros(np.broadcast_shapes(p.shape, lam.shape))
        for a in range(self.dim):
            u = frame[..., a]
            coeff = _dot(self.diffusion_deriv(p, u, e), lam)
            out = out + coeff * u
        return out

    def retract_deriv(
        self, p: np.ndarray, v: np.ndarray, u: np.ndarray, w: np.ndarray
    ) -> np.ndarray:
        """Derivative of retract at (p, v) in directions (u, w).

        Fallback: central difference along the straight line (p + tu, v + tw).
        """
        eps = self.fd_step
        rp = self.retract(p + eps * u, v + eps * w)
        rm = self.retract(p - eps * u, v - eps * w)
        return (rp - rm) / (2.0 * eps)

    def retract_deriv_adjoint(self, p: np.ndarray, v: np.ndarray, mu: np.ndarray):
        """Adjoint of (u, w) -> retract_deriv(p, v, u, w) applied to mu.

        Returns the pair of cotangents for the point slot and the
        displacement slot.  Fallback assembles the two Jacobians column by
        column from retract_deriv.
        """
        m = self.ambient_dim
        basis = np.eye(m)
        zero = np.zeros(m)
        cot_u = np.zeros(np.broadcast_shapes(p.shape, mu.shape))
        cot_w = np.zeros_like(cot_u)
        for j in range(m):
            e = np.broadcast_to(basis[j], p.shape)
            z = np.broadcast_to(zero, p.shape)
            cot_u[..., j] = np.sum(self.retract_deriv(p, v, e, z) * mu, axis=-1)
            cot_w[..., j] = np.sum(self.retract_deriv(p, v, z, e) * mu, axis=-1)
        return cot_u, cot_w

    def ito_drift(self, p: np.ndarray) -> np.ndarray:
        """Drift of the Ito form of dx = X(x) o dB: half the trace term.

        Fallback sums 0.5 * D_{X(p)e_k}[X(.)e_k](p) over an ambient basis.
        """
        m = self.ambient_dim
        basis = np.eye(m)
        total = np.zeros(p.shape)
        for k in range(m):
            e = np.broadcast_to(basis[k], p.shape)
            total = total + self.diffusion_deriv(p, self.diffusion_apply(p, e), e)
        return 0.5 * total

    # -- frames ---------------------------------------------------------------

    def tangent_frame(self, p: np.ndarray) -> np.ndarray:
        """Orthonormal tangent basis at p, shape (..., m, n), deterministic.

        Fallback: eigenvectors of the tangent projector with eigenvalue 1.
        """
        proj = self.diffusion_matrix(p)
        eigval, eigvec = np.linalg.eigh(proj)
        # eigh sorts ascending; the trailing n eigenvalues are the 1s
        frame = eigvec[..., -self.dim:]
        keep = eigval[..., -self.dim:]
        if np.min(keep) < 0.5:
            raise ConstraintViolation("tangent projector is rank deficient")
        return frame


class Sphere(EmbeddedManifold):
    """Unit sphere S^n in R^{n+1} with the round metric.

    X(x) = I - x x^T, ker X(x) = span{x}, Ric = (n-1) id, and the retraction
    is radial normalization.
    """

    def __init__(self, dim: int = 2):
        if dim < 1:
            raise ValueError("sphere dimension must be >= 1")
        self.dim = dim
        self.ambient_dim = dim + 1
        self.name = f"sphere:{dim}"

    def constraint_defect(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p, axis=-1) - 1.0

    def project(self, p: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(p, axis=-1, keepdims=True)
        if np.min(norm) < 1e-8:
            raise DegenerateStep("cannot normalize a near-zero ambient point")
        return p / norm

    def tangent_project(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        return v - p * _dot(p, v)

    def kernel_apply(self, p: np.ndarray, e: np.ndarray) -> np.ndarray:
        return p * _dot(p, e)

    def ricci_apply(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (self.dim - 1) * self.tangent_project(p, v)

    def retract(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.project(p + v)

    def diffusion_deriv(self, p: np.ndarray, u: np.ndarray, e: np.ndarray) -> np.ndarray:
        # X is globally polynomial, so this is exact for any ambient u
        return -u * _dot(p, e) - p * _dot(u, e)

    def diffusion_deriv_adjoint(self, p: np.ndarray, e: np.ndarray, lam: np.ndarray) -> np.ndarray:
        return -lam * _dot(p, e) - e * _dot(p, lam)

    def retract_deriv(
        self, p: np.ndarray, v: np.ndarray, u: np.ndarray, w: np.ndarray
    ) -> np.ndarray:
        y = p + v
        s = np.linalg.norm(y, axis=-1, keepdims=True)
        if np.min(s) < 1e-8:
            raise DegenerateStep("retraction derivative at a near-zero point")
        r = y / s
        d = u + w
        return (d - r * _dot(r, d)) / s

    def retract_deriv_adjoint(self, p: np.ndarray, v: np.ndarray, mu: np.ndarray):
        # the derivative is (u, w) -> P_r (u + w)/s with P_r symmetric
        y = p + v
        s = np.linalg.norm(y, axis=-1, keepdims=True)
        if np.min(s) < 1e-8:
            raise DegenerateStep("retraction derivative at a near-zero point")
        r = y / s
        cot = (mu - r * _dot(r, mu)) / s
        return cot, cot

    def ito_drift(self, p: np.ndarray) -> np.ndarray:
        return -0.5 * self.dim * p

    def tangent_frame(self, p: np.ndarray) -> np.ndarray:
        """Householder completion of p to an orthonormal ambient basis."""
        m = self.ambient_dim
        sign = np.where(p[..., -1:] >= 0.0, 1.0, -1.0)
        w = p.copy()
        w[..., -1] += sign[..., 0]
        wnorm2 = np.sum(w * w, axis=-1, keepdims=True)
        house = np.eye(m) - 2.0 * w[..., :, None] * w[..., None, :] / wnorm2[..., None]
        # last column of house is -sign * p; the first n columns span T_pS
        return house[..., :, : self.dim]


class FlatSpace(EmbeddedManifold):
    """R^m as a trivial embedded manifold: X = I, no kernel, zero curvature.

    Degenerate reference case: the solution path equals the driving path, so
    conditioning on the path is conditioning on everything.
    """

    def __init__(self, dim: int = 1):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = dim
        self.ambient_dim = dim
        self.name = f"flat:{dim}"

    def constraint_defect(self, p: np.ndarray) -> np.ndarray:
        return np.zeros(p.shape[:-1])

    def project(self, p: np.ndarray) -> np.ndarray:
        return p

    def tangent_project(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        return v

    def default_start(self) -> np.ndarray:
        return np.zeros(self.ambient_dim)

    def kernel_apply(self, p: np.ndarray, e: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(p.shape, e.shape))

    def ricci_apply(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(p.shape, v.shape))

    def retract(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        return p + v

    def diffusion_deriv(self, p: np.ndarray, u: np.ndarray, e: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(p.shape, u.shape, e.shape))

    def diffusion_deriv_adjoint(self, p: np.ndarray, e: np.ndarray, lam: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(p.shape, e.shape, lam.shape))

    def retract_deriv(
        self, p: np.ndarray, v: np.ndarray, u: np.ndarray, w: np.ndarray
    ) -> np.ndarray:
        return u + w

    def retract_deriv_adjoint(self, p: np.ndarray, v: np.ndarray, mu: np.ndarray):
        return mu, mu

    def ito_drift(self, p: np.ndarray) -> np.ndarray:
        return np.zeros(p.shape)

    def tangent_frame(self, p: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.eye(self.dim), p.shape + (self.dim,)).copy()


def make_manifold(name: str) -> EmbeddedManifold:
    """Build a manifold from a config string like 'sphere:2' or 'flat:3'."""
    kind, _, arg = name.partition(":")
    dim = int(arg) if arg else 2
    if kind == "sphere":
        return Sphere(dim)
    if kind == "flat":
        return FlatSpace(dim)
    raise ValueError(f"unknown manifold {name!r}")


def covariant_step_residual(
    manifold: EmbeddedManifold, p: np.ndarray, e: np.ndarray, fd_step: float = 1e-4
) -> float:
    """Norm of the covariant derivative of the field x -> X(x)e at p.

    For gradient systems this vanishes whenever e is orthogonal to ker X(p),
    which is enforced as a precondition.  Computed by central differences of
    X(.)e along retraction curves, projected back to the tangent space.
    """
    manifold.require_point(p)
    kernel_part = np.linalg.norm(manifold.kernel_apply(p, e))
    scale = max(1.0, float(np.linalg.norm(e)))
    if kernel_part > 1e-8 * scale:
        raise ValueError("e has a component in ker X(p); residual is not expected to vanish")
    frame = manifold.tangent_frame(p)
    worst = 0.0
    for a in range(manifold.dim):
        u = frame[..., a]
        xp = manifold.retract(p, fd_step * u)
        xm = manifold.retract(p, -fd_step * u)
        deriv = (manifold.diffusion_apply(xp, e) - manifold.diffusion_apply(xm, e)) / (2 * fd_step)
        residual = manifold.tangent_project(p, deriv)
        worst = max(worst, float(np.linalg.norm(residual)))
    return worst


def ricci_finite_difference(
    manifold: EmbeddedManifold,
    p: np.ndarray,
    eps_outer: float = 1e-3,
    eps_inner: float = 1e-4,
) -> np.ndarray:
    """Ricci tensor at p in tangent-frame coordinates, by finite differences.

    Uses the projected connection nabla_u V = P(D_u V) on extension fields
    V(q) = P_q v, with nested central differences: the inner difference forms
    nabla_b C as a field, the outer difference differentiates that field.
    Returns the (n, n) matrix Ric(E_a, E_b); oracle for `ricci_apply`.
    """
    manifold.require_point(p)
    n = manifold.dim
    frame = manifold.tangent_frame(p)

    def ext(q: np.ndarray, vec: np.ndarray) -> np.ndarray:
        return manifold.tangent_project(q, vec)

    def conn(q: np.ndarray, u: np.ndarray, vec: np.ndarray) -> np.ndarray:
        # nabla_u [P(.) vec] at q, u tangent at q
        qp = manifold.retract(q, eps_inner * u)
        qm = manifold.retract(q, -eps_inner * u)
        return manifold.tangent_project(q, (ext(qp, vec) - ext(qm, vec)) / (2 * eps_inner))

    def curvature(ea: np.ndarray, eb: np.ndarray, ec: np.ndarray) -> np.ndarray:
        # R(ea, eb) ec at p via nested differences of the connection
        pp = manifold.retract(p, eps_outer * ea)
        pm = manifold.retract(p, -eps_outer * ea)
        term1 = manifold.tangent_project(
            p, (conn(pp, ext(pp, eb), ec) - conn(pm, ext(pm, eb), ec)) / (2 * eps_outer)
        )
        pp = manifold.retract(p, eps_outer * eb)
        pm = manifold.retract(p, -eps_outer * eb)
        term2 = manifold.tangent_project(
            p, (conn(pp, ext(pp, ea), ec) - conn(pm, ext(pm, ea), ec)) / (2 * eps_outer)
        )
        # ambient Lie bracket of the two extension fields
        da_b = (ext(manifold.retract(p, eps_inner * ea), eb)
                - ext(manifold.retract(p, -eps_inner * ea), eb)) / (2 * eps_inner)
        db_a = (ext(manifold.retract(p, eps_inner * eb), ea)
                - ext(manifold.retract(p, -eps_inner * eb), ea)) / (2 * eps_inner)
        bracket = da_b - db_a
        term3 = conn(p, manifold.tangent_project(p, bracket), ec)
        return term1 - term2 - term3

    ric = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            total = 0.0
            for c in range(n):
                r = curvature(frame[..., c], frame[..., a], frame[..., b])
                total += float(np.dot(r, frame[..., c]))
            ric[a, b] = total
    return ric
