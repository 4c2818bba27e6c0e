"""Conditional expectation given the solution path, by kernel-noise resampling.

The diffusion coefficient discards the kernel component of each Brownian
increment, so conditioning a functional on the whole solution path amounts to
redrawing exactly that discarded component: a resample keeps the
kernel-complement part of every increment and replaces the kernel part with
fresh Gaussian noise.  Re-solving the SDE from a resampled noise reproduces
the base path up to a discretization deviation that is monitored by a gate.

Every identity checker here returns per-member arrays (one entry per base
path); aggregation into z-scores happens in the harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .bismut import (
    BismutField,
    BismutVector,
    bismut_inner,
    damped_differentiate,
    damped_integrate,
)
from .geometry import EmbeddedManifold
from .ito_map import SolutionBundle, solution_derivative, solution_gradient, solve_paths
from .wiener import (
    CellBasis,
    ChaosEstimate,
    FlatField,
    NoisePath,
    StepProcess,
    TimeGrid,
    cell_kernel_integral,
    flat_divergence,
    member_rng,
    sample_increment_block,
)

GATE_CONSTANT = 12.0


class ResamplerInvalid(RuntimeError):
    """A resampled path strayed from its base path beyond the gate."""


def default_gate(grid: TimeGrid, n_resamples: int) -> float:
    """Path-reproduction gate: scales as sqrt(T dt) with a slow ensemble factor.

    The constant is calibrated so that desk-scale runs (dt = 1e-3 on the
    2-sphere) pass with margin while grossly coarse steps trip the gate.
    """
    size_factor = 1.0 + np.sqrt(np.log(max(n_resamples, 2)))
    return GATE_CONSTANT * np.sqrt(grid.horizon * grid.dt) * size_factor


@dataclass
class ResamplePlan:
    """Resampling setup for a batch of base paths.

    base holds B solution paths (batch axis first); member_ids are their
    ensemble indices, which seed the per-member fresh-noise streams (stream
    tag 1, keeping them independent of the base-noise streams).
    """

    manifold: EmbeddedManifold
    base: SolutionBundle
    member_ids: np.ndarray
    n_resamples: int
    seed: int
    tolerance: float
    _noise: Optional[NoisePath] = field(default=None, repr=False)
    _bundle: Optional[SolutionBundle] = field(default=None, repr=False)
    _deviations: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.base.path.ndim != 3:
            raise ValueError("plan expects a batched base bundle (B, N+1, m)")
        if self.n_resamples < 1:
            raise ValueError("need at least one resample")

    @property
    def grid(self) -> TimeGrid:
        return self.base.noise.grid

    def _build(self) -> None:
        grid = self.grid
        inc = self.base.noise.increments                      # (B, N, m)
        x_left = self.base.path[:, :-1, :]                    # (B, N, m)
        keep = self.manifold.kernel_complement_apply(x_left, inc)
        m = inc.shape[-1]
        K = self.n_resamples
        beta = np.empty((len(self.member_ids), K, grid.steps, m))
        scale = np.sqrt(grid.dt)
        for row, j in enumerate(self.member_ids):
            beta[row] = member_rng(self.seed, int(j), 1).normal(
                scale=scale, size=(K, grid.steps, m)
            )
        fresh = self.manifold.kernel_apply(x_left[:, None], beta)
        increments = keep[:, None] + fresh                    # (B, K, N, m)
        self._noise = NoisePath(grid, increments)
        paths = solve_paths(self.manifold, self.base.path[:, None, 0, :], increments)
        self._bundle = SolutionBundle(self.manifold, self._noise, paths)
        self._deviations = np.max(
            np.linalg.norm(paths - self.base.path[:, None], axis=-1), axis=-1
        )

    def resampled(self) -> SolutionBundle:
        """Noise and re-solved paths for all resamples, batch shape (B, K)."""
        if self._bundle is None:
            self._build()
        return self._bundle

    def deviations(self) -> np.ndarray:
        """Sup-distance of each re-solved path from its base path, (B, K)."""
        if self._deviations is None:
            self._build()
        return self._deviations

    def gate_violations(self) -> int:
        return int(np.sum(self.deviations() > self.tolerance))

    def require_valid(self) -> None:
        count = self.gate_violations()
        if count:
            worst = float(self.deviations().max())
            raise ResamplerInvalid(
                f"{count} resampled paths deviate beyond the gate "
                f"(worst {worst:.3f} > {self.tolerance:.3f}); the step size is "
                "too coarse for this conditioning"
            )


def make_plan(
    manifold: EmbeddedManifold,
    base: SolutionBundle,
    member_ids: Sequence[int],
    n_resamples: int,
    seed: int,
    tolerance: Optional[float] = None,
) -> ResamplePlan:
    if n_resamples < 1:
        raise ValueError("need at least one resample")
    ids = np.asarray(list(member_ids), dtype=int)
    batch = base.path.shape[:-2]
    if len(batch) != 1 or ids.shape[0] != batch[0]:
        raise ValueError("member ids must match the base ensemble, one per row")
    if tolerance is None:
        tolerance = default_gate(base.noise.grid, n_resamples)
    return ResamplePlan(
        manifold=manifold,
        base=base,
        member_ids=ids,
        n_resamples=n_resamples,
        seed=seed,
        tolerance=float(tolerance),
    )


def resample_noise(plan: ResamplePlan, k: int) -> NoisePath:
    """Noise path of resample k for every base member, increments (B, N, m)."""
    if not 0 <= k < plan.n_resamples:
        raise IndexError("resample index out of range")
    return NoisePath(plan.grid, plan.resampled().noise.increments[:, k])


@dataclass
class ConditionalEstimate:
    """Resampler mean with its Monte Carlo error, per base member."""

    value: np.ndarray
    std_error: np.ndarray
    n_used: int


def conditional_expectation(f: Callable, plan: ResamplePlan) -> ConditionalEstimate:
    """Mean of f over the resample ensemble: estimates E{f | path}.

    f(omega, bundle) must broadcast over the (B, K) batch of the resampled
    ensemble and return one scalar per evaluation.
    """
    res = plan.resampled()
    vals = np.asarray(f(res.noise, res))
    if vals.shape != (plan.base.path.shape[0], plan.n_resamples):
        raise ValueError("functional must return one value per resample")
    mean = np.mean(vals, axis=1)
    if plan.n_resamples > 1:
        se = np.std(vals, axis=1, ddof=1) / np.sqrt(plan.n_resamples)
    else:
        se = np.full_like(mean, np.inf)
    return ConditionalEstimate(mean, se, plan.n_resamples)


@dataclass
class CheckResult:
    """Per-member lhs/rhs samples of one two-sided identity."""

    check_id: str
    lhs: np.ndarray
    rhs: np.ndarray


def filtered_increments(plan: ResamplePlan) -> np.ndarray:
    """Kernel-complement part of the base increments, (B, N, m).

    This is the component of the driving noise that the conditioning fixes.
    """
    x_left = plan.base.path[:, :-1, :]
    return plan.manifold.kernel_complement_apply(x_left, plan.base.noise.increments)


def conditional_ito_check(alpha: StepProcess, plan: ResamplePlan) -> CheckResult:
    """Conditional Ito integral identity for an adapted integrand.

    lhs: resampler mean of the Ito integral of alpha.
    rhs: the Ito sum of the resampler mean of alpha against the
    kernel-complement-filtered base increments.  Shared resamples pair the
    two sides, so the difference is exactly centered for adapted alpha.
    """
    if not alpha.adapted:
        raise ValueError("the conditional Ito identity needs an adapted integrand")
    res = plan.resampled()
    vals = alpha.values_for(res.noise, res)               # (B, K, N, p, m)
    if vals.shape[-2] != 1:
        raise ValueError("identity checks use scalar (p = 1) integrands")
    lhs = np.einsum("bknpm,bknm->bkp", vals, res.noise.increments)[..., 0]
    alpha_bar = np.mean(vals[..., 0, :], axis=1)          # (B, N, m)
    rhs = np.einsum("bnm,bnm->b", alpha_bar, filtered_increments(plan))
    return CheckResult(alpha.name or "conditional_ito", np.mean(lhs, axis=1), rhs)


def pathspace_divergence(V: BismutField, plan: ResamplePlan) -> ConditionalEstimate:
    """Divergence of a path-space vector field via its flat pullback.

    Evaluates the flat divergence of Y(V) at each resampled noise and
    averages: the conditional-expectation representation of div V.
    """
    pulled = V.pullback()
    res = plan.resampled()
    vals = flat_divergence(pulled, res.noise, res)
    return ConditionalEstimate(
        np.mean(vals, axis=1),
        np.std(vals, axis=1, ddof=1) / np.sqrt(plan.n_resamples),
        plan.n_resamples,
    )


def pathspace_ibp_check(f, V: BismutField, plan: ResamplePlan) -> CheckResult:
    """Adjointness of the path-space gradient and divergence.

    lhs: df(V) evaluated directly along the realized field on the base path.
    rhs: -f times the resampled divergence of V, so that E[lhs] = E[rhs]
    over the base ensemble under the adjoint-of-minus-gradient convention.
    """
    realized = V.evaluate(plan.base)
    lhs = f.pathwise_derivative(plan.base, realized.values)
    div = pathspace_divergence(V, plan)
    rhs = -np.asarray(f.value(plan.base.noise, plan.base)) * div.value
    return CheckResult("pathspace_ibp", lhs, rhs)


def divergence_projection_check(
    U: FlatField, V: BismutField, plan: ResamplePlan
) -> CheckResult:
    """Projection intertwines divergences: div of the conditioned field vs
    the conditional expectation of the flat divergence.

    V must be the conditional projection of U onto the path's tangent
    directions; this holds for the supported span (deterministic directions
    with path-measurable coefficients), where projecting term by term is
    exact.  Shared resamples pair the two sides.
    """
    res = plan.resampled()
    lhs_vals = flat_divergence(U, res.noise, res)          # E{div U | path}
    rhs_vals = flat_divergence(V.pullback(), res.noise, res)
    return CheckResult(
        "divergence_projection",
        np.mean(lhs_vals, axis=1),
        np.mean(rhs_vals, axis=1),
    )


def weak_derivative(f, plan: ResamplePlan) -> tuple:
    """Riesz representative of the weak derivative of a path observable.

    Runs the adjoint sweep at every resampled noise, averages the flat
    gradients, and projects onto the tangent spaces of the base path: the
    damped derivative of the result represents df against the energy metric.
    Returns (BismutVector, per-step standard error of the averaged gradient).
    """
    res = plan.resampled()
    grads = f.gradients(res)                               # (B, K, k, m)
    cotangents = {
        t: grads[..., j, :] for j, t in enumerate(f.times)
    }
    G = solution_gradient(plan.manifold, res.path, res.noise.increments, cotangents)
    G_mean = np.mean(G, axis=1)                            # (B, N, m)
    G_se = np.std(G, axis=1, ddof=1) / np.sqrt(plan.n_resamples)
    x_left = plan.base.path[:, :-1, :]
    b = plan.manifold.tangent_project(x_left, G_mean)
    vec = BismutVector(plan.base, damped_integrate(plan.base, b), b)
    return vec, G_se


def weak_pairing_check(
    f, V: BismutField, plan: ResamplePlan, df: Optional[BismutVector] = None
) -> CheckResult:
    """Pairing identity: E[<df, V>] = -E[f div V] with df the weak derivative.

    Exercises the whole chain: adjoint gradients at resampled noises, the
    Riesz representative in the energy metric, and the resampled divergence.
    A precomputed df (from weak_derivative on the same plan) may be passed to
    share the adjoint sweep between checks.
    """
    if df is None:
        df, _ = weak_derivative(f, plan)
    realized = V.evaluate(plan.base)
    lhs = bismut_inner(df, realized)
    rhs = -np.asarray(f.value(plan.base.noise, plan.base)) * pathspace_divergence(V, plan).value
    return CheckResult("weak_pairing", lhs, rhs)


def weak_representation_check(
    f, V: BismutField, plan: ResamplePlan, df: Optional[BismutVector] = None
) -> CheckResult:
    """Pathwise check that <df, V> equals the direct derivative df(V)."""
    if df is None:
        df, _ = weak_derivative(f, plan)
    realized = V.evaluate(plan.base)
    lhs = bismut_inner(df, realized)
    rhs = f.pathwise_derivative(plan.base, realized.values)
    return CheckResult("weak_representation", lhs, rhs)


def conditional_bismut_projection(U: FlatField, plan: ResamplePlan) -> tuple:
    """Conditional projection of a flat H-vector field onto path tangents.

    For each resample, runs the forward variational equation at the resampled
    noise along the realized direction U(omega'), projects the resulting
    tangent path onto the base path's tangent spaces, and averages.  Returns
    (BismutVector, per-step standard error of the averaged tangent path).
    """
    res = plan.resampled()
    deriv = U.direction_deriv(res.noise, res) * plan.grid.dt
    v = solution_derivative(plan.manifold, res.path, res.noise.increments, deriv)
    v_base = plan.manifold.tangent_project(plan.base.path[:, None], v)
    v_mean = np.mean(v_base, axis=1)
    v_se = np.std(v_base, axis=1, ddof=1) / np.sqrt(plan.n_resamples)
    b = damped_differentiate(plan.base, v_mean)
    return BismutVector(plan.base, v_mean, b), v_se


def conditional_chaos(
    plan: ResamplePlan, estimate: ChaosEstimate, orders: Sequence[int] = (0, 1, 2)
) -> dict:
    """Conditional iterated integrals of estimated chaos kernels.

    Conditioning replaces each increment by its kernel-complement part in
    every iterated integral (fresh kernel noise is centered and independent
    across steps), so J^k is the cell-kernel integral over the filtered base
    increments.  Returns {order: per-member values}.
    """
    filtered = NoisePath(plan.grid, filtered_increments(plan))
    out = {}
    B = plan.base.path.shape[0]
    for k in orders:
        if k == 0:
            out[0] = np.full(B, estimate.mean)
        elif k == 1:
            out[1] = cell_kernel_integral(estimate.basis, 1, estimate.order1, filtered)
        elif k == 2:
            out[2] = cell_kernel_integral(estimate.basis, 2, estimate.order2, filtered)
        else:
            raise ValueError("only orders 0, 1, 2 are supported")
    return out


def iter_plans(
    manifold: EmbeddedManifold,
    x0: np.ndarray,
    grid: TimeGrid,
    seed: int,
    n_paths: int,
    n_resamples: int,
    chunk: int = 8,
    tolerance: Optional[float] = None,
) -> Iterator[ResamplePlan]:
    """Stream the conditional ensemble in member chunks of batched plans.

    Base noise comes from the per-member streams (seed, j), fresh kernel
    noise from (seed, j, 1); results are therefore independent of the chunk
    size.
    """
    m = manifold.ambient_dim
    for start in range(0, n_paths, chunk):
        members = range(start, min(start + chunk, n_paths))
        inc = sample_increment_block(seed, grid, m, members)
        noise = NoisePath(grid, inc)
        base = SolutionBundle(manifold, noise, solve_paths(manifold, x0, inc))
        yield make_plan(manifold, base, members, n_resamples, seed, tolerance)
