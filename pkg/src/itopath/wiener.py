"""Flat Wiener space on a uniform time grid.

Sample space is the set of increment arrays of shape (..., N, m): leading axes
are ensemble axes, N time steps, m noise dimensions.  Everything downstream
(Cameron-Martin calculus, Ito and iterated integrals, divergence, chaos
projections) is exact finite-dimensional Gaussian calculus on that array, so
the flat integration-by-parts identities hold with no discretization bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into `steps` intervals."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        """Grid times t_0 = 0 .. t_N = T, length steps + 1."""
        return np.arange(self.steps + 1) * self.dt


def member_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for one logical stream; streams are independent of scheduling."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def sample_increment_block(
    seed: int, grid: TimeGrid, m: int, members: Sequence[int]
) -> np.ndarray:
    """Brownian increments for the given ensemble members, shape (len, N, m).

    Member i always draws from the stream (seed, i), so any chunking of the
    ensemble yields the same numbers.
    """
    out = np.empty((len(members), grid.steps, m))
    scale = np.sqrt(grid.dt)
    for row, i in enumerate(members):
        out[row] = member_rng(seed, i).normal(scale=scale, size=(grid.steps, m))
    return out


@dataclass
class NoisePath:
    """Driving path, possibly a whole ensemble: increments (..., N, m)."""

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        if self.increments.shape[-2] != self.grid.steps:
            raise ValueError("increment count does not match grid")

    @property
    def m(self) -> int:
        return self.increments.shape[-1]

    def cumulative(self) -> np.ndarray:
        """Path values B at grid times, shape (..., N+1, m), B_0 = 0."""
        inc = self.increments
        out = np.zeros(inc.shape[:-2] + (self.grid.steps + 1, inc.shape[-1]))
        np.cumsum(inc, axis=-2, out=out[..., 1:, :])
        return out

    def values_at(self, indices: Sequence[int]) -> np.ndarray:
        """B at the given grid indices, shape (..., k, m)."""
        return self.cumulative()[..., list(indices), :]


def sample_noise(seed: int, grid: TimeGrid, m: int = 1, n_paths: Optional[int] = None) -> NoisePath:
    """Draw a noise path (member 0) or an ensemble of n_paths members."""
    members = range(n_paths) if n_paths is not None else range(1)
    block = sample_increment_block(seed, grid, m, members)
    if n_paths is None:
        block = block[0]
    return NoisePath(grid, block)


@dataclass
class CameronMartinVector:
    """Finite-energy direction h, stored by its step derivative (..., N, m)."""

    grid: TimeGrid
    deriv: np.ndarray

    def __post_init__(self):
        if self.deriv.shape[-2] != self.grid.steps:
            raise ValueError("derivative count does not match grid")

    def values(self) -> np.ndarray:
        """h at grid times, h(0) = 0, shape (..., N+1, m)."""
        d = self.deriv
        out = np.zeros(d.shape[:-2] + (self.grid.steps + 1, d.shape[-1]))
        np.cumsum(d * self.grid.dt, axis=-2, out=out[..., 1:, :])
        return out

    def values_at(self, indices: Sequence[int]) -> np.ndarray:
        return self.values()[..., list(indices), :]


def constant_direction(grid: TimeGrid, vector: np.ndarray) -> CameronMartinVector:
    """h with constant derivative, h(t) = t * vector."""
    deriv = np.broadcast_to(np.asarray(vector, dtype=float), (grid.steps, len(vector))).copy()
    return CameronMartinVector(grid, deriv)


def h_inner(h1: CameronMartinVector, h2: CameronMartinVector) -> float:
    """Energy inner product: sum_i <h1dot_i, h2dot_i> dt."""
    if h1.grid != h2.grid:
        raise ValueError("grid mismatch")
    return float(np.sum(h1.deriv * h2.deriv) * h1.grid.dt)


@dataclass
class CylindricalFunction:
    """Smooth function of the path through finitely many grid times.

    `body` maps stacked path values of shape (..., k, m) to scalars (...,);
    `body_grad` returns the gradient with the same (..., k, m) shape.  Both
    must broadcast over leading ensemble axes.
    """

    times: tuple
    body: Callable[[np.ndarray], np.ndarray]
    body_grad: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def value(self, omega: NoisePath, bundle=None) -> np.ndarray:
        return np.asarray(self.body(omega.values_at(self.times)))

    def gradients(self, omega: NoisePath) -> np.ndarray:
        return np.asarray(self.body_grad(omega.values_at(self.times)))

    def h_derivative(self, omega: NoisePath, bundle, direction_deriv: np.ndarray) -> np.ndarray:
        """Derivative along a direction given by step derivatives (..., N, m)."""
        dt = omega.grid.dt
        dvals = np.zeros(direction_deriv.shape[:-2] + (omega.grid.steps + 1, direction_deriv.shape[-1]))
        np.cumsum(direction_deriv * dt, axis=-2, out=dvals[..., 1:, :])
        grads = self.gradients(omega)
        return np.sum(grads * dvals[..., list(self.times), :], axis=(-2, -1))


def check_gradient(f: CylindricalFunction, values: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error of body_grad against central differences at `values`."""
    base_grad = np.asarray(f.body_grad(values))
    fd = np.zeros_like(base_grad)
    flat = values.reshape(-1)
    for idx in range(flat.size):
        vp = flat.copy(); vp[idx] += eps
        vm = flat.copy(); vm[idx] -= eps
        fd.reshape(-1)[idx] = (f.body(vp.reshape(values.shape)) - f.body(vm.reshape(values.shape))) / (2 * eps)
    scale = max(1.0, float(np.max(np.abs(base_grad))))
    return float(np.max(np.abs(fd - base_grad)) / scale)


def h_derivative(f: CylindricalFunction, omega: NoisePath, h: CameronMartinVector) -> np.ndarray:
    """d^H f at omega in direction h: sum_j <grad_j, h(t_j)>."""
    grads = f.gradients(omega)
    hvals = h.values_at(f.times)
    return np.sum(grads * hvals, axis=(-2, -1))


@dataclass
class StepProcess:
    """Grid-indexed family of linear maps R^m -> R^p, evaluated per path.

    `rule(omega, bundle)` returns the values (..., N, p, m).  The adapted flag
    asserts that values[i] uses increments[0..i) only; it is trusted, not
    introspected, and gates the Ito integral.
    """

    grid: TimeGrid
    rule: Callable
    adapted: bool
    name: str = ""

    def values_for(self, omega: NoisePath, bundle=None) -> np.ndarray:
        vals = np.asarray(self.rule(omega, bundle))
        if vals.shape[-3] != self.grid.steps:
            raise ValueError("step process values do not match grid")
        return vals


def constant_step_process(grid: TimeGrid, matrix: np.ndarray, name: str = "") -> StepProcess:
    """Deterministic alpha with the same (p, m) matrix at every step."""
    matrix = np.asarray(matrix, dtype=float)

    def rule(omega, bundle=None):
        batch = omega.increments.shape[:-2]
        return np.broadcast_to(matrix, batch + (grid.steps,) + matrix.shape)

    return StepProcess(grid, rule, adapted=True, name=name)


def ito_integral(alpha: StepProcess, omega: NoisePath, bundle=None) -> np.ndarray:
    """Left-point Ito sum: sum_i alpha_i(Delta B_i), shape (..., p)."""
    if not alpha.adapted:
        raise ValueError("Ito integral requires an adapted integrand")
    vals = alpha.values_for(omega, bundle)
    return np.einsum("...npm,...nm->...p", vals, omega.increments)


# -- H-vector fields on flat Wiener space -------------------------------------


@dataclass
class FieldTerm:
    """One term g * u of a flat H-vector field.

    `direction` is either a CameronMartinVector or a rule
    (omega, bundle) -> step derivatives (..., N, m); rule-valued directions
    must be adapted for the divergence formula used here.  `coefficient` is
    None (meaning 1) or an object with value(omega, bundle) and
    h_derivative(omega, bundle, direction_deriv).
    """

    direction: Union[CameronMartinVector, Callable]
    coefficient: object = None
    name: str = ""

    def direction_deriv(self, omega: NoisePath, bundle=None) -> np.ndarray:
        if isinstance(self.direction, CameronMartinVector):
            d = self.direction.deriv
            return np.broadcast_to(d, omega.increments.shape[:-2] + d.shape)
        return np.asarray(self.direction(omega, bundle))


@dataclass
class FlatField:
    """H-vector field in the supported span: sum of FieldTerms."""

    grid: TimeGrid
    terms: list
    name: str = ""

    def direction_deriv(self, omega: NoisePath, bundle=None) -> np.ndarray:
        """Realized step derivative of the field at omega, (..., N, m)."""
        total = None
        for term in self.terms:
            u = term.direction_deriv(omega, bundle)
            if term.coefficient is not None:
                g = np.asarray(term.coefficient.value(omega, bundle))
                u = g[..., None, None] * u
            total = u if total is None else total + u
        if total is None:
            total = np.zeros_like(omega.increments)
        return total


def flat_divergence(V: FlatField, omega: NoisePath, bundle=None) -> np.ndarray:
    """Divergence of V under the adjoint-of-minus-gradient sign convention.

    For a term g*u with u deterministic or adapted,
    div(g*u) = -g * sum_i <udot_i, dB_i> + d^H g(u); this is the exact
    finite-dimensional Gaussian adjoint, so E[d^H f(V)] = -E[f div V] holds
    without discretization error.
    """
    out = np.zeros(omega.increments.shape[:-2])
    for term in V.terms:
        u = term.direction_deriv(omega, bundle)
        ito_part = np.sum(u * omega.increments, axis=(-2, -1))
        if term.coefficient is None:
            out = out - ito_part
        else:
            g = np.asarray(term.coefficient.value(omega, bundle))
            out = out - g * ito_part + term.coefficient.h_derivative(omega, bundle, u)
    return out


# -- iterated integrals and chaos ---------------------------------------------


def iterated_integral(order: int, kernel: np.ndarray, omega: NoisePath) -> np.ndarray:
    """I^1 or I^2 of a step kernel.

    order 1: kernel (N, m), returns sum_i <kernel_i, dB_i>.
    order 2: kernel (N, N) for m = 1 or (N, N, m, m); only entries with i < j
    are read (kernel given on the simplex, symmetric extension implied) and
    I^2 = 2 sum_{i<j} dB_i^T kernel_ij dB_j, so E[(I^2)^2] = 2||kernel||^2
    over the off-diagonal product grid.
    """
    inc = omega.increments
    N = omega.grid.steps
    if order == 1:
        return np.einsum("nm,...nm->...", np.asarray(kernel, dtype=float), inc)
    if order == 2:
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim == 2:
            kernel = kernel[:, :, None, None]
        mask = np.triu(np.ones((N, N)), k=1)
        masked = kernel * mask[:, :, None, None]
        return 2.0 * np.einsum("...ia,ijab,...jb->...", inc, masked, inc)
    raise ValueError("only orders 1 and 2 are supported")


@dataclass(frozen=True)
class CellBasis:
    """Coarse partition of the step axis into contiguous cells for chaos fits."""

    grid: TimeGrid
    n_cells: int

    def __post_init__(self):
        if not 1 <= self.n_cells <= self.grid.steps:
            raise ValueError("cell count must be between 1 and the step count")
        if self.grid.steps % self.n_cells:
            raise ValueError("cell count must divide the step count")

    @property
    def steps_per_cell(self) -> int:
        return self.grid.steps // self.n_cells

    @property
    def width(self) -> float:
        return self.steps_per_cell * self.grid.dt

    def cell_increments(self, increments: np.ndarray) -> np.ndarray:
        """Summed increments per cell, (..., C, m)."""
        shape = increments.shape[:-2] + (self.n_cells, self.steps_per_cell, increments.shape[-1])
        return increments.reshape(shape).sum(axis=-2)

    def cell_quadratic(self, increments: np.ndarray) -> np.ndarray:
        """Within-cell quadratic variation sum_i dB_i dB_i^T, (..., C, m, m)."""
        shape = increments.shape[:-2] + (self.n_cells, self.steps_per_cell, increments.shape[-1])
        blocks = increments.reshape(shape)
        return np.einsum("...cia,...cib->...cab", blocks, blocks)


@dataclass
class ChaosEstimate:
    """Chaos kernels of one functional on a cell basis, with standard errors."""

    basis: CellBasis
    mean: float
    order1: np.ndarray          # (C, m)
    order1_se: np.ndarray
    order2: np.ndarray          # (C, C, m, m), symmetric under (c,d,a,b)->(d,c,b,a)
    order2_se: np.ndarray


def chaos_project(f_values: np.ndarray, omega: NoisePath, basis: CellBasis) -> ChaosEstimate:
    """Diagonal (moment-matching) projection of f onto chaos orders 0..2.

    Estimators: order 1 from E[f xi_c] / w_c; order 2 off-diagonal from
    E[f xi_c xi_d^T] / (2 w_c w_d); order 2 diagonal from
    E[f (xi_c xi_c^T - Q_c)] / (2 dt^2 s (s-1)) with Q_c the realized in-cell
    quadratic variation and s the steps per cell (exact for kernels constant
    on cells).  Estimates of distinct cells decouple because cell increments
    are independent.
    """
    inc = omega.increments
    if f_values.shape != inc.shape[:-2]:
        raise ValueError("f_values must be one scalar per ensemble member")
    n = f_values.size
    if n < 2:
        raise ValueError("ensemble too small")
    m = inc.shape[-1]
    xi = basis.cell_increments(inc)                       # (n, C, m)
    quad = basis.cell_quadratic(inc)                      # (n, C, m, m)
    w = basis.width
    s = basis.steps_per_cell
    dt = basis.grid.dt
    centered = f_values - np.mean(f_values)

    def mean_se(samples: np.ndarray):
        mu = np.mean(samples, axis=0)
        se = np.std(samples, axis=0, ddof=1) / np.sqrt(n)
        return mu, se

    lin_samples = centered[:, None, None] * xi / w
    order1, order1_se = mean_se(lin_samples)

    cross = np.einsum("...ca,...db->...cdab", xi, xi)
    diag_adjust = np.zeros_like(cross)
    idx = np.arange(basis.n_cells)
    diag_adjust[..., idx, idx, :, :] = quad
    pair = cross - diag_adjust
    # off-diagonal scale 2 w^2; diagonal scale 2 dt^2 s(s-1)
    scale = np.full((basis.n_cells, basis.n_cells), 2.0 * w * w)
    if s > 1:
        scale[idx, idx] = 2.0 * dt * dt * s * (s - 1)
    else:
        scale[idx, idx] = np.inf
    quad_samples = centered[:, None, None, None, None] * pair / scale[:, :, None, None]
    order2, order2_se = mean_se(quad_samples)
    return ChaosEstimate(
        basis=basis,
        mean=float(np.mean(f_values)),
        order1=order1,
        order1_se=order1_se,
        order2=order2,
        order2_se=order2_se,
    )


def cell_kernel_integral(basis: CellBasis, order: int, kernel: np.ndarray, omega: NoisePath) -> np.ndarray:
    """Exact discrete I^k of a kernel that is constant on basis cells.

    order 1: kernel (C, m); order 2: kernel (C, C, m, m) read on and above the
    cell diagonal, with the in-cell diagonal i = j excluded exactly.
    """
    inc = omega.increments
    xi = basis.cell_increments(inc)
    if order == 1:
        return np.einsum("cm,...cm->...", np.asarray(kernel, dtype=float), xi)
    if order == 2:
        kernel = np.asarray(kernel, dtype=float)
        C = basis.n_cells
        mask = np.triu(np.ones((C, C)), k=1)
        off = 2.0 * np.einsum("...ca,cdab,cd,...db->...", xi, kernel, mask, xi)
        quad = basis.cell_quadratic(inc)
        within = np.einsum("...ca,ccab,...cb->...", xi, kernel, xi) - np.einsum(
            "...cab,ccab->...", quad, kernel
        )
        return off + within
    raise ValueError("only orders 1 and 2 are supported")


# -- ensemble statistics -------------------------------------------------------


def mean_se(samples: np.ndarray, axis: int = 0):
    """Sample mean and standard error along an ensemble axis."""
    samples = np.asarray(samples)
    n = samples.shape[axis]
    mu = np.mean(samples, axis=axis)
    if n < 2:
        return mu, np.full_like(np.asarray(mu, dtype=float), np.inf)
    se = np.std(samples, axis=axis, ddof=1) / np.sqrt(n)
    return mu, se
