"""Coupled mean field game iteration for Levy-driven dynamics.

The game pairs a backward Hamilton-Jacobi-Bellman equation for the value
function with a forward Fokker-Planck equation for the population density,
tied together by a running-cost coupling F(x, mu(t)) and a terminal coupling
G(x, mu(T)). The fixed-point map S takes a candidate density trajectory,
solves the HJB equation against it, and pushes the initial density through
the resulting feedback drift; equilibria are fixed points of S. They are
found by damped Picard iteration or fictitious-play averaging, with the
outer residual measured as the flat-metric distance between a trajectory
and its best response, uniformly in time.

Local couplings f(x, m(x)) are reached by continuation: mollify the density
argument at scale eps, solve the smoothed game, and shrink eps toward the
grid resolution while warm-starting each level from the previous one.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from .fp_solver import FPInput, FPSolution, solve_fp_forward
from .hjb_solver import Hamiltonian, HJBInput, HJBSolution, PicardConfig, solve_hjb_backward
from .levy_ops import Symbol
from .measure_metrics import DiscreteMeasure, d0_distance
from .spectral_core import (
    Field,
    Grid,
    ProbabilityField,
    fftn,
    ifftn,
    real_part,
)

_FLAG_TOL = 1e-12


# -- convolution plumbing ---------------------------------------------------------

def _offset_kernel(kernel: Field) -> np.ndarray:
    # reindex node samples by displacement so index 0 carries rho(0)
    return np.fft.ifftshift(kernel.values)


def _convolve(kernel: Field, values: np.ndarray) -> np.ndarray:
    """Periodic (kernel * values)(x_j) = sum_k kernel(x_j - x_k) values_k vol."""
    spec = fftn(_offset_kernel(kernel)) * fftn(values)
    return real_part(ifftn(spec)) * kernel.grid.cell_volume


def _reversed_values(values: np.ndarray) -> np.ndarray:
    # rho(-x) sampled on the same nodes: flip every axis, then shift the
    # -L row back into place (x = -L is its own mirror on the torus)
    out = np.flip(values)
    for axis in range(values.ndim):
        out = np.roll(out, 1, axis=axis)
    return out


def _kernel_even(values: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(values))))
    return float(np.max(np.abs(values - _reversed_values(values)))) <= _FLAG_TOL * scale


def _map_nondecreasing(phi: Callable, k_max: float) -> bool:
    probe = np.linspace(0.0, max(k_max, 1.0), 257)
    try:
        vals = np.asarray(phi(probe), dtype=float)
    except Exception:
        return False
    if vals.shape != probe.shape or not np.all(np.isfinite(vals)):
        return False
    scale = max(1.0, float(np.max(np.abs(vals))))
    return bool(np.all(np.diff(vals) >= -_FLAG_TOL * scale))


# -- coupling variants ------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class NonlocalCoupling:
    """Coupling built from convolution with a fixed kernel.

    Without a pointwise map the coupling is plain smoothing,
    F(x, mu) = (rho * mu)(x). With one it is the composite
    F = rho * Phi(rho * mu), which pairs against m1 - m2 as the integral
    of (Phi(a1) - Phi(a2))(a1 - a2) with a_i = rho * m_i, so rho >= 0,
    rho even, and Phi nondecreasing make it monotone. The plain form
    instead pairs through the kernel transform times |spectrum|^2, so its
    monotone flag requires that transform to be nonnegative on the grid;
    kernel positivity alone does not decide the sign.
    """

    kernel: Field
    pointwise: Callable | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.kernel.values)):
            raise ValueError("coupling kernel contains non-finite values")

    @property
    def grid(self) -> Grid:
        return self.kernel.grid

    def evaluate(self, mu: ProbabilityField) -> np.ndarray:
        if mu.grid != self.grid:
            raise ValueError("density and coupling kernel live on different grids")
        smoothed = _convolve(self.kernel, mu.values)
        if self.pointwise is None:
            return smoothed
        inner = np.asarray(self.pointwise(smoothed), dtype=float)
        return _convolve(self.kernel, np.broadcast_to(inner, self.grid.shape))

    @property
    def monotone(self) -> bool:
        vals = self.kernel.values
        scale = max(1.0, float(np.max(np.abs(vals))))
        if float(vals.min()) < -_FLAG_TOL * scale or not _kernel_even(vals):
            return False
        if self.pointwise is not None:
            return _map_nondecreasing(self.pointwise, float(vals.max()))
        k_hat = fftn(_offset_kernel(self.kernel))
        top = max(1.0, float(np.max(np.abs(k_hat))))
        return float(k_hat.real.min()) >= -1e-10 * top


@dataclasses.dataclass(frozen=True)
class LocalCoupling:
    """F(x, mu) = f(x, mu(x)): the cost reads the density pointwise.

    f takes (mesh, k) with mesh the coordinate arrays and k the density
    values. Games carrying one are solved through the mollified
    continuation (solve_mfg_local); the raw pointwise read is kept for
    evaluation and as the continuation target.
    """

    f: Callable

    def evaluate(self, mu: ProbabilityField) -> np.ndarray:
        vals = np.asarray(self.f(mu.grid.coordinate_mesh(), mu.values), dtype=float)
        return np.broadcast_to(vals, mu.grid.shape)

    @property
    def monotone(self) -> bool:
        # the pointwise pairing is not the smoothed one the flag certifies
        return False


@dataclasses.dataclass(frozen=True)
class MollifiedCoupling:
    """F(x, mu) = f(x, (mu * phi_eps)(x)) for a compact unit-mass bump."""

    f: Callable
    epsilon: float
    mollifier: Field

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("mollifier width must be positive")

    @property
    def grid(self) -> Grid:
        return self.mollifier.grid

    def evaluate(self, mu: ProbabilityField) -> np.ndarray:
        if mu.grid != self.grid:
            raise ValueError("density and mollifier live on different grids")
        # convolution of nonnegative data; clamp spectral round-off so f
        # only ever sees admissible density values
        smoothed = np.maximum(_convolve(self.mollifier, mu.values), 0.0)
        vals = np.asarray(self.f(self.grid.coordinate_mesh(), smoothed), dtype=float)
        return np.broadcast_to(vals, self.grid.shape)

    @property
    def monotone(self) -> bool:
        # probe f(x, k) in k with constant density levels at every x
        mesh = self.grid.coordinate_mesh()
        levels = np.linspace(0.0, 8.0, 17)
        prev = None
        for k in levels:
            try:
                vals = np.broadcast_to(
                    np.asarray(self.f(mesh, np.full(self.grid.shape, k)), dtype=float),
                    self.grid.shape,
                )
            except Exception:
                return False
            if not np.all(np.isfinite(vals)):
                return False
            if prev is not None and np.min(vals - prev) < -_FLAG_TOL * max(
                1.0, float(np.max(np.abs(vals)))
            ):
                return False
            prev = vals
        return True


Coupling = NonlocalCoupling | LocalCoupling | MollifiedCoupling


def mollified_coupling(f: Callable, epsilon: float, grid: Grid) -> MollifiedCoupling:
    """Smooth a pointwise coupling by a fixed bump at scale epsilon.

    The bump is exp(-1/(1 - |x/eps|^2)) on |x| < eps, sampled on the grid
    and normalized to unit discrete mass, so convolution against it
    preserves mass exactly. epsilon must exceed the grid spacing to be
    resolvable and fit inside the box.
    """
    if epsilon <= max(grid.spacing):
        raise ValueError(
            f"mollifier width {epsilon} is under the grid resolution {max(grid.spacing)}"
        )
    if epsilon >= min(grid.half_extent):
        raise ValueError("mollifier wider than the box")
    r = grid.radius_mesh() / epsilon
    vals = np.zeros(grid.shape)
    inside = r < 1.0
    vals[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    vals /= vals.sum() * grid.cell_volume
    return MollifiedCoupling(f=f, epsilon=float(epsilon), mollifier=Field(grid, vals))


def monotonicity_spot_check(
    coupling: Coupling, grid: Grid, n_pairs: int = 20, seed: int = 0, tol: float = 1e-10
) -> dict:
    """Pair random smooth densities and evaluate the monotonicity pairing.

    Reports the worst value of the integral of (F(m1) - F(m2)) against
    m1 - m2 over random ProbabilityField pairs; a coupling flagged
    monotone must keep it above -tol. Pairs are smooth bump mixtures, the
    class of densities the solvers actually produce.
    """
    rng = np.random.default_rng(seed)
    vol = grid.cell_volume
    worst = np.inf
    for _ in range(n_pairs):
        m1 = _random_density(grid, rng)
        m2 = _random_density(grid, rng)
        gap = coupling.evaluate(m1) - coupling.evaluate(m2)
        inner = float(np.sum(gap * (m1.values - m2.values)) * vol)
        worst = min(worst, inner)
    return {
        "n_pairs": n_pairs,
        "worst_inner_product": worst,
        "flagged_monotone": coupling.monotone,
        "satisfied": worst >= -tol,
    }


def _random_density(grid: Grid, rng: np.random.Generator) -> ProbabilityField:
    base = grid.radius_mesh()
    vals = np.full(grid.shape, 0.05 / grid.box_volume)
    for _ in range(3):
        width = rng.uniform(0.08, 0.25) * min(grid.half_extent)
        bump = np.exp(-(base**2) / (2 * width**2))
        shift = tuple(int(rng.integers(0, n)) for n in grid.points)
        vals += rng.uniform(0.3, 1.0) * np.roll(bump, shift, axis=tuple(range(grid.dim)))
    return ProbabilityField.normalized(grid, vals)


# -- problem and solution records ---------------------------------------------------

@dataclasses.dataclass(frozen=True)
class IterationConfig:
    """Outer-loop policy for the fixed-point iteration.

    damped-picard mixes each iterate with its best response at weight
    theta, halving theta whenever the residual rises; fictitious-play
    averages with weight 1/(k+1). Either way the first update replaces
    the seed outright (a seed is not a best-response output), and the
    loop stops once the residual sup_t of the flat distance between the
    iterate and its best response falls to tol_d0.
    """

    scheme: str = "damped-picard"
    theta: float = 0.5
    tol_d0: float = 1e-4
    max_outer: int = 40

    def __post_init__(self):
        if self.scheme not in ("damped-picard", "fictitious-play"):
            raise ValueError(f"unknown iteration scheme {self.scheme!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("damping weight must lie in (0, 1]")
        if self.tol_d0 <= 0:
            raise ValueError("residual tolerance must be positive")
        if self.max_outer < 1:
            raise ValueError("need at least one outer iteration")


@dataclasses.dataclass(frozen=True)
class MFGProblem:
    hamiltonian: Hamiltonian
    coupling: Coupling | None
    terminal_coupling: Coupling | None
    initial: ProbabilityField
    symbol: Symbol
    horizon: float
    n_steps: int
    iteration: IterationConfig = IterationConfig()
    picard: PicardConfig = PicardConfig()

    def __post_init__(self):
        if self.initial.grid != self.symbol.grid:
            raise ValueError("initial density and symbol live on different grids")
        for c in (self.coupling, self.terminal_coupling):
            if c is not None and hasattr(c, "grid") and c.grid != self.symbol.grid:
                raise ValueError("coupling grid does not match the problem grid")
        if not 1.0 < self.symbol.order < 2.0:
            raise ValueError(
                f"generator order {self.symbol.order} outside (1, 2); the coupled "
                "system needs strictly fractional smoothing with integrable drift"
            )
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one time step")

    @property
    def grid(self) -> Grid:
        return self.symbol.grid

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclasses.dataclass
class MFGSolution:
    problem: MFGProblem
    u_fields: list[Field]
    u_gradients: list[tuple[np.ndarray, ...]]
    m_fields: list[ProbabilityField]
    residuals: np.ndarray
    theta_history: np.ndarray
    converged: bool
    diagnostics: dict

    @property
    def n_outer(self) -> int:
        return len(self.residuals)

    @property
    def final_residual(self) -> float:
        return float(self.residuals[-1])


# -- the fixed-point map ------------------------------------------------------------

def seed_trajectory(prob: MFGProblem, profile: str = "initial") -> list[ProbabilityField]:
    """Constant-in-time starting trajectory for the outer iteration.

    initial repeats m0; uniform spreads mass evenly; bump concentrates it
    near the origin at a few grid cells' width.
    """
    grid = prob.grid
    if profile == "initial":
        base = prob.initial.values
    elif profile == "uniform":
        base = np.full(grid.shape, 1.0 / grid.box_volume)
    elif profile == "bump":
        width = 4.0 * max(grid.spacing)
        base = np.exp(-(grid.radius_mesh() ** 2) / (2 * width**2))
        base = base / (base.sum() * grid.cell_volume)
    else:
        raise ValueError(f"unknown seed profile {profile!r}")
    return [
        ProbabilityField(grid, base.copy(), time_tag=float(t)) for t in prob.times
    ]


def _interp_sources(times: np.ndarray, arrays: list[np.ndarray]) -> Callable:
    def source(t: float, mesh) -> np.ndarray:
        if t <= times[0]:
            return arrays[0]
        if t >= times[-1]:
            return arrays[-1]
        j = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[j]) / (times[j + 1] - times[j])
        return (1.0 - w) * arrays[j] + w * arrays[j + 1]

    return source


def _check_trajectory(mu: Sequence[ProbabilityField], prob: MFGProblem) -> None:
    if len(mu) != prob.n_steps + 1:
        raise ValueError(
            f"trajectory has {len(mu)} nodes, problem time grid has {prob.n_steps + 1}"
        )
    for field in mu:
        if field.grid != prob.grid:
            raise ValueError("trajectory field lives on a different grid")


def best_response(
    mu: Sequence[ProbabilityField], prob: MFGProblem
) -> tuple[HJBSolution, FPSolution]:
    """One application of the fixed-point map S.

    Solves the backward equation with running cost F(x, mu(t)) (linearly
    interpolated between the trajectory nodes) and terminal data
    G(x, mu(T)), then drives the initial density forward along the
    feedback drift -grad_p H evaluated on the value function.
    """
    _check_trajectory(mu, prob)
    grid = prob.grid
    mesh = grid.coordinate_mesh()

    source = None
    if prob.coupling is not None:
        node_costs = [prob.coupling.evaluate(m) for m in mu]
        source = _interp_sources(prob.times, node_costs)
    if prob.terminal_coupling is not None:
        terminal = prob.terminal_coupling.evaluate(mu[-1])
    else:
        terminal = np.zeros(grid.shape)

    hjb = solve_hjb_backward(
        HJBInput(
            hamiltonian=prob.hamiltonian,
            terminal=Field(grid, terminal, time_tag=prob.horizon),
            symbol=prob.symbol,
            horizon=prob.horizon,
            n_steps=prob.n_steps,
            source=source,
            picard=prob.picard,
        )
    )
    drift = [
        tuple(-np.asarray(g) for g in prob.hamiltonian.grad_p(mesh, u.values, grads))
        for u, grads in zip(hjb.fields, hjb.gradients)
    ]
    fp = solve_fp_forward(
        FPInput(
            initial=prob.initial,
            symbol=prob.symbol,
            horizon=prob.horizon,
            n_steps=prob.n_steps,
            drift=drift,
        )
    )
    return hjb, fp


def trajectory_distance(
    a: Sequence[ProbabilityField], b: Sequence[ProbabilityField]
) -> float:
    """sup over time nodes of the flat distance between the trajectories.

    Uses the lattice-Lipschitz evaluation, which is the exact flat metric
    in one dimension and an upper equivalent within sqrt(d) above it.
    """
    if len(a) != len(b):
        raise ValueError("trajectories cover different time grids")
    worst = 0.0
    for fa, fb in zip(a, b):
        da = DiscreteMeasure.from_field(fa)
        db = DiscreteMeasure.from_field(fb)
        worst = max(worst, d0_distance(da, db, method="grid-lp").value)
    return worst


def _mix(
    a: ProbabilityField, b: ProbabilityField, weight: float, t: float
) -> ProbabilityField:
    vals = (1.0 - weight) * a.values + weight * b.values
    tol = 1e-6 * max(float(vals.max()), 1e-300)
    return ProbabilityField(a.grid, vals, time_tag=t, negative_tol=tol)


def solve_mfg(
    prob: MFGProblem, seed: Sequence[ProbabilityField] | str = "initial"
) -> MFGSolution:
    """Damped Picard (or fictitious-play) iteration on the map S.

    Each outer pass solves one best response, measures the residual
    sup_t d0(mu_k, S(mu_k)), and either stops at tol_d0 or mixes toward
    the response. A run that exhausts max_outer returns converged=False
    with the full residual series; non-convergence of the iteration says
    nothing about the game itself, so no error is raised.
    """
    if isinstance(prob.coupling, LocalCoupling) or isinstance(
        prob.terminal_coupling, LocalCoupling
    ):
        raise ValueError(
            "pointwise local coupling needs the mollified continuation; "
            "use solve_mfg_local"
        )
    mu = seed_trajectory(prob, seed) if isinstance(seed, str) else list(seed)
    _check_trajectory(mu, prob)
    cfg = prob.iteration
    theta = cfg.theta
    residuals: list[float] = []
    thetas: list[float] = []
    hjb = fp = None
    converged = False
    for k in range(cfg.max_outer):
        hjb, fp = best_response(mu, prob)
        residuals.append(trajectory_distance(mu, fp.fields))
        if residuals[-1] <= cfg.tol_d0:
            converged = True
            break
        if cfg.scheme == "fictitious-play":
            step = 1.0 / (k + 1)
        elif k == 0:
            step = 1.0
        else:
            if len(residuals) >= 2 and residuals[-1] > residuals[-2]:
                theta = max(theta / 2.0, 2.0**-8)
            step = theta
        thetas.append(step)
        mu = [
            _mix(m_old, m_new, step, float(t))
            for m_old, m_new, t in zip(mu, fp.fields, prob.times)
        ]
    diagnostics = {
        "scheme": cfg.scheme,
        "picard_sweeps": hjb.picard_sweeps,
        "fp_positivity_defects": fp.positivity_defects,
    }
    if not converged:
        diagnostics["message"] = (
            f"outer budget of {cfg.max_outer} exhausted at residual "
            f"{residuals[-1]:.3e}; the residual series is retained"
        )
    return MFGSolution(
        problem=prob,
        u_fields=hjb.fields,
        u_gradients=hjb.gradients,
        m_fields=fp.fields,
        residuals=np.array(residuals),
        theta_history=np.array(thetas),
        converged=converged,
        diagnostics=diagnostics,
    )


def solve_mfg_local(
    prob: MFGProblem,
    epsilon_schedule: Sequence[float],
    seed: Sequence[ProbabilityField] | str = "initial",
) -> MFGSolution:
    """Continuation in the mollification width for pointwise couplings.

    Solves the game with the coupling's density argument smoothed at each
    width in the (strictly decreasing) schedule, warm-starting every level
    from the previous solution. The answer is the smallest-width solution;
    the drift of the density trajectory across levels is reported in the
    diagnostics.
    """
    if not isinstance(prob.coupling, LocalCoupling):
        raise ValueError("continuation applies to problems with a pointwise coupling")
    eps = [float(e) for e in epsilon_schedule]
    if not eps:
        raise ValueError("empty width schedule")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("width schedule must be strictly decreasing")
    if eps[-1] <= max(prob.grid.spacing):
        raise ValueError(
            f"smallest width {eps[-1]} is under the grid resolution "
            f"{max(prob.grid.spacing)}"
        )

    mu = seed_trajectory(prob, seed) if isinstance(seed, str) else list(seed)
    levels: list[dict] = []
    inter_level: list[float] = []
    prev_m: list[ProbabilityField] | None = None
    sol: MFGSolution | None = None
    for e in eps:
        smoothed = mollified_coupling(prob.coupling.f, e, prob.grid)
        terminal = prob.terminal_coupling
        if isinstance(terminal, LocalCoupling):
            terminal = mollified_coupling(terminal.f, e, prob.grid)
        level_prob = dataclasses.replace(
            prob, coupling=smoothed, terminal_coupling=terminal
        )
        sol = solve_mfg(level_prob, seed=mu)
        if prev_m is not None:
            inter_level.append(trajectory_distance(prev_m, sol.m_fields))
        levels.append(
            {
                "epsilon": e,
                "converged": sol.converged,
                "residuals": sol.residuals.tolist(),
            }
        )
        mu = sol.m_fields
        prev_m = sol.m_fields
    sol.diagnostics["epsilon_schedule"] = eps
    sol.diagnostics["levels"] = levels
    sol.diagnostics["inter_level_d0"] = inter_level
    return sol


# -- uniqueness energy identity -----------------------------------------------------

def uniqueness_energy_diagnostic(
    sol1: MFGSolution,
    sol2: MFGSolution,
    prob: MFGProblem,
    convexity_constant: float | None = None,
) -> dict:
    """Grid quadrature of the three terms whose sum vanishes at equilibria.

    Pairing the equations of two solutions gives a time-boundary term from
    the terminal coupling, a time integral of the running-cost pairing,
    and the convexity term integral of (m1 + m2) / (2C) |Du1 - Du2|^2.
    For a monotone game every term is nonnegative, so their size measures
    how far apart two candidate equilibria are; two converged runs must
    shrink the convexity term to the residual scale. C is the convexity
    modulus of the Hamiltonian: 1 for the quadratic preset, otherwise it
    must be supplied or the term is reported unnormalized at C = 1.
    """
    if sol1.problem.grid != prob.grid or sol2.problem.grid != prob.grid:
        raise ValueError("solutions come from a different grid than the problem")
    if len(sol1.m_fields) != len(prob.times) or len(sol2.m_fields) != len(prob.times):
        raise ValueError("solutions cover a different time grid than the problem")
    if sol1.problem.horizon != prob.horizon or sol2.problem.horizon != prob.horizon:
        raise ValueError("solutions cover a different horizon than the problem")

    vol = prob.grid.cell_volume
    times = prob.times

    if convexity_constant is not None:
        c_const, normalized = float(convexity_constant), True
    elif prob.hamiltonian.preset == "quadratic":
        c_const, normalized = 1.0, True
    else:
        c_const, normalized = 1.0, False

    if prob.terminal_coupling is None:
        boundary = 0.0
    else:
        gap = prob.terminal_coupling.evaluate(
            sol1.m_fields[-1]
        ) - prob.terminal_coupling.evaluate(sol2.m_fields[-1])
        diff = sol1.m_fields[-1].values - sol2.m_fields[-1].values
        boundary = float(np.sum(gap * diff) * vol)

    coupling_nodes = np.zeros(len(times))
    if prob.coupling is not None:
        for k, (m1, m2) in enumerate(zip(sol1.m_fields, sol2.m_fields)):
            gap = prob.coupling.evaluate(m1) - prob.coupling.evaluate(m2)
            coupling_nodes[k] = np.sum(gap * (m1.values - m2.values)) * vol

    convexity_nodes = np.zeros(len(times))
    for k, (m1, m2, g1, g2) in enumerate(
        zip(sol1.m_fields, sol2.m_fields, sol1.u_gradients, sol2.u_gradients)
    ):
        sq = sum((a - b) ** 2 for a, b in zip(g1, g2))
        weight = (m1.values + m2.values) / (2.0 * c_const)
        convexity_nodes[k] = np.sum(weight * sq) * vol

    coupling_term = float(np.trapezoid(coupling_nodes, times))
    convexity_term = float(np.trapezoid(convexity_nodes, times))
    tol = 1e-10
    return {
        "boundary_term": boundary,
        "coupling_term": coupling_term,
        "convexity_term": convexity_term,
        "convexity_constant": c_const,
        "normalized": normalized,
        "satisfied": min(boundary, coupling_term, convexity_term) >= -tol,
    }
