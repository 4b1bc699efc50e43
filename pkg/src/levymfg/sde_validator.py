"""Monte-Carlo simulation of the controlled Levy SDE dX = b dt + dL.

The point of this module is independent validation: empirical laws of the
simulated process are compared against densities computed by the spectral
solvers, so none of the sampling here may go through the FFT machinery.
Symmetric stable increments come from the Chambers-Mallows-Stuck transform,
isotropic stable vectors in d >= 2 from Brownian subordination by a Kanter
positive-stable time change, and tempered jumps from thinning a stable
envelope plus a small-jump Gaussian. All scalings match the operator
normalization E e^{i xi . L_t} = e^{-t |xi|^sigma}.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .levy_ops import (
    AnisotropicSum,
    IsotropicStable,
    LevySpec,
    TemperedStable1D,
    second_moment_ball,
    tail_mass,
)
from .spectral_core import Grid, ProbabilityField

CHUNK = 1 << 15  # paths per rng stream; fixed so results never depend on scheduling


class NotSimulable(ValueError):
    """No exact sampler exists for this jump specification."""


class TorusWrapWarning(UserWarning):
    """Paths wrap around the comparison box often enough to distort laws."""


# -- elementary samplers ------------------------------------------------------------

def _cms_symmetric(rng: np.random.Generator, sigma: float, n: int) -> np.ndarray:
    """Standard symmetric stable variates with E e^{i xi X} = e^{-|xi|^sigma}."""
    u = rng.uniform(-np.pi / 2, np.pi / 2, n)
    w = rng.standard_exponential(n)
    if sigma == 1.0:
        return np.tan(u)
    return (
        np.sin(sigma * u)
        / np.cos(u) ** (1.0 / sigma)
        * (np.cos((1.0 - sigma) * u) / w) ** ((1.0 - sigma) / sigma)
    )


def _kanter_positive(rng: np.random.Generator, alpha: float, n: int) -> np.ndarray:
    """Positive stable variates with E e^{-lam S} = e^{-lam^alpha}, 0<alpha<1."""
    v = rng.uniform(0.0, np.pi, n)
    w = rng.standard_exponential(n)
    a = (
        np.sin(alpha * v) ** (alpha / (1.0 - alpha))
        * np.sin((1.0 - alpha) * v)
        / np.sin(v) ** (1.0 / (1.0 - alpha))
    )
    return (a / w) ** ((1.0 - alpha) / alpha)


def sample_stable_increment(
    sigma: float,
    dt: float,
    n: int,
    rng: np.random.Generator | None = None,
    dim: int = 1,
) -> np.ndarray:
    """n increments of the isotropic stable process over a step dt.

    Returns shape (n,) for dim 1 and (n, dim) otherwise. The time scaling is
    dt^{1/sigma}, matching e^{-dt |xi|^sigma}; sigma = 2 is the Brownian
    endpoint with per-axis variance 2 dt.
    """
    if not 1.0 < sigma <= 2.0:
        raise ValueError(f"sigma must be in (1, 2], got {sigma}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if rng is None:
        rng = np.random.default_rng(0)
    scale = dt ** (1.0 / sigma)
    if dim == 1:
        return scale * _cms_symmetric(rng, sigma, n)
    if sigma == 2.0:
        return math.sqrt(2.0 * dt) * rng.standard_normal((n, dim))
    # rotationally invariant vector: Brownian motion run at an independent
    # positive (sigma/2)-stable time, B_{2 S} with S ~ dt^{2/sigma} S_1
    s = dt ** (2.0 / sigma) * _kanter_positive(rng, sigma / 2.0, n)
    return np.sqrt(2.0 * s)[:, None] * rng.standard_normal((n, dim))


def empirical_characteristic(samples: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """mean over samples of e^{i xi x} at each probe frequency."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return np.exp(1j * np.outer(xi, np.asarray(samples))).mean(axis=1)


# -- tempered one-dimensional increments --------------------------------------------

@dataclasses.dataclass
class _ThinningStats:
    proposed: int = 0
    accepted: int = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def _tempered_increments(
    spec: TemperedStable1D,
    dt: float,
    n: int,
    rng: np.random.Generator,
    stats: _ThinningStats,
    delta: float = 0.2,
) -> np.ndarray:
    """Increments of the tempered process over dt.

    Jumps above delta are compound Poisson, sampled by thinning the stable
    envelope C |z|^{-1-Y} (accept with probability e^{-G z+ - M z-}); jumps
    below delta are replaced by a Gaussian matching their second moment; the
    compensator restricted to delta <= |z| < 1 enters as a deterministic
    drift so the total matches the operator's compensation convention.
    """
    if not 0 < delta < 1:
        raise ValueError("thinning threshold must sit inside (0, 1)")
    var_small = second_moment_ball(spec, delta)
    comp, _ = integrate.quad(
        lambda z: z * (spec.density(np.array([z]))[0] - spec.density(np.array([-z]))[0]),
        delta,
        1.0,
        limit=200,
    )
    lam_env = 2.0 * spec.C * delta**-spec.Y / spec.Y
    out = math.sqrt(dt * var_small) * rng.standard_normal(n)
    out -= dt * comp
    counts = rng.poisson(dt * lam_env, n)
    total = int(counts.sum())
    if total:
        mags = delta * rng.uniform(0.0, 1.0, total) ** (-1.0 / spec.Y)
        signs = np.where(rng.uniform(0.0, 1.0, total) < 0.5, 1.0, -1.0)
        z = signs * mags
        taper = np.where(z > 0, spec.G, spec.M)
        keep = rng.uniform(0.0, 1.0, total) < np.exp(-taper * np.abs(z))
        stats.proposed += total
        stats.accepted += int(keep.sum())
        owner = np.repeat(np.arange(n), counts)
        out += np.bincount(owner, weights=np.where(keep, z, 0.0), minlength=n)
    return out


def thinning_envelope_ratio(spec: TemperedStable1D, delta: float = 0.2) -> float:
    """Analytic acceptance rate of the stable-envelope thinning above delta."""
    lam_env = 2.0 * spec.C * delta**-spec.Y / spec.Y
    return tail_mass(spec, delta) / lam_env


# -- spec dispatch -------------------------------------------------------------------

def is_simulable(spec: LevySpec) -> bool:
    if isinstance(spec, (IsotropicStable, TemperedStable1D)):
        return True
    if isinstance(spec, AnisotropicSum):
        return all(is_simulable(s) for _, s in spec.components)
    return False


def _increment_draw(spec: LevySpec, dt: float, dim: int, stats: _ThinningStats):
    """(rng, n) -> (n, dim) increment array for one time step."""
    if isinstance(spec, IsotropicStable):
        if spec.dim != dim:
            raise ValueError(f"spec dimension {spec.dim} != ensemble dimension {dim}")

        def draw(rng, n):
            inc = sample_stable_increment(spec.sigma, dt, n, rng, dim=dim)
            return inc[:, None] if dim == 1 else inc

        return draw
    if isinstance(spec, TemperedStable1D):
        if dim != 1:
            raise ValueError("tempered spec is one-dimensional")
        return lambda rng, n: _tempered_increments(spec, dt, n, rng, stats)[:, None]
    if isinstance(spec, AnisotropicSum):
        if spec.dim != dim:
            raise ValueError(f"spec dimension {spec.dim} != ensemble dimension {dim}")
        draws = [
            (axis, _increment_draw(comp, dt, 1, stats))
            for axis, comp in spec.components
        ]

        def draw(rng, n):
            out = np.zeros((n, dim))
            for axis, inner in draws:
                out[:, axis] += inner(rng, n)[:, 0]
            return out

        return draw
    raise NotSimulable(
        f"no exact sampler for {type(spec).__name__}; "
        "only stable, tempered, and axis-sum specs are simulable"
    )


# -- drift and initial data ----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GridDrift:
    """Drift trajectory stored on a grid, evaluated off-grid by periodic
    multilinear interpolation and linearly in time between nodes."""

    grid: Grid
    times: np.ndarray
    components: Sequence[tuple[np.ndarray, ...]]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if len(times) != len(self.components):
            raise ValueError("one component tuple per time node")
        if len(times) < 1 or np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        times = self.times
        k = int(np.searchsorted(times, t, side="right") - 1)
        k = min(max(k, 0), len(times) - 1)
        if k == len(times) - 1 or t <= times[0]:
            comps = self.components[min(k, len(times) - 1)]
            return _interp_periodic(self.grid, comps, x)
        w = (t - times[k]) / (times[k + 1] - times[k])
        a = _interp_periodic(self.grid, self.components[k], x)
        b = _interp_periodic(self.grid, self.components[k + 1], x)
        return (1.0 - w) * a + w * b


def _interp_periodic(grid: Grid, comps: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of per-axis component arrays at points x
    (n, d), wrapping indices around the torus."""
    n, d = x.shape
    pos = np.empty((n, d))
    base = np.empty((n, d), dtype=np.int64)
    frac = np.empty((n, d))
    for ax in range(d):
        L = grid.half_extent[ax]
        h = grid.spacing[ax]
        p = (x[:, ax] + L) / h
        b = np.floor(p)
        base[:, ax] = b.astype(np.int64) % grid.points[ax]
        frac[:, ax] = p - b
        pos[:, ax] = p
    out = np.zeros((n, d))
    for corner in range(1 << d):
        weight = np.ones(n)
        idx = []
        for ax in range(d):
            if corner >> ax & 1:
                idx.append((base[:, ax] + 1) % grid.points[ax])
                weight = weight * frac[:, ax]
            else:
                idx.append(base[:, ax])
                weight = weight * (1.0 - frac[:, ax])
        flat = np.ravel_multi_index(tuple(idx), grid.shape)
        for ax in range(d):
            out[:, ax] += weight * np.asarray(comps[ax]).ravel()[flat]
    return out


def initial_sampler_from_field(field: ProbabilityField) -> Callable:
    """(rng, n) -> (n, d) positions distributed per the field's density.

    One dimension inverts the piecewise-linear CDF; higher dimensions use
    rejection from the uniform envelope with nearest-cell density lookup.
    """
    grid = field.grid
    if grid.dim == 1:
        h = grid.spacing[0]
        cdf = np.concatenate([[0.0], np.cumsum(field.values) * h])
        cdf /= cdf[-1]
        # nodes are cell centers: cell k spans [x_k - h/2, x_k + h/2]
        edges = np.concatenate(
            [grid.axis_coordinates(0) - h / 2, [grid.half_extent[0] - h / 2]]
        )

        def draw(rng, n):
            u = rng.uniform(0.0, 1.0, n)
            cell = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(cdf) - 2)
            width = cdf[cell + 1] - cdf[cell]
            inner = np.where(width > 0, (u - cdf[cell]) / np.where(width > 0, width, 1.0), 0.5)
            return (edges[cell] + inner * h)[:, None]

        return draw

    peak = float(field.values.max())
    lows = np.array([-L for L in grid.half_extent])
    spans = np.array([2 * L for L in grid.half_extent])
    spacing = np.array(grid.spacing)

    def draw(rng, n):
        out = np.empty((n, grid.dim))
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 256)
            pts = lows + spans * rng.uniform(0.0, 1.0, (m, grid.dim))
            # round to the nearest node, wrapping the outer half-cells
            cells = np.mod(
                np.rint((pts - lows) / spacing).astype(np.int64),
                np.array(grid.points),
            )
            dens = field.values[tuple(cells.T)]
            keep = rng.uniform(0.0, peak, m) < dens
            take = min(int(keep.sum()), n - filled)
            out[filled : filled + take] = pts[keep][:take]
            filled += take
        return out

    return draw


# -- the ensemble --------------------------------------------------------------------

@dataclasses.dataclass
class PathEnsemble:
    times: np.ndarray  # (n_t + 1,)
    positions: np.ndarray  # (n_t + 1, n_paths, d), wrapped to the torus
    seed: int
    torus_extent: tuple[float, ...]
    wrap_events: int
    acceptance_rate: float  # tempered thinning; NaN when no thinning ran

    @property
    def n_paths(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


def simulate_controlled_sde(
    spec: LevySpec,
    initial: ProbabilityField | Callable,
    horizon: float,
    n_steps: int,
    n_paths: int,
    drift: Callable | GridDrift | None = None,
    seed: int = 0,
    torus_extent: Sequence[float] | None = None,
) -> PathEnsemble:
    """Euler-Maruyama paths X_{k+1} = X_k + b(t_k, X_k) dt + dL_k.

    initial is a ProbabilityField (sampled by inverse CDF or rejection) or a
    callable (rng, n) -> (n, d). Paths are generated in fixed-size chunks,
    each from its own counter-jumped Philox stream, so results are
    reproducible and independent of scheduling. Positions are wrapped into
    the comparison box each step; a wrap rate above 1% warns that the box is
    too small for faithful law comparison.
    """
    if n_steps < 1 or horizon <= 0:
        raise ValueError("need horizon > 0 and at least one step")
    if n_paths < 0:
        raise ValueError("n_paths must be nonnegative")
    if isinstance(initial, ProbabilityField):
        if torus_extent is None:
            torus_extent = initial.grid.half_extent
        sampler = initial_sampler_from_field(initial)
        dim = initial.grid.dim
    else:
        if torus_extent is None:
            raise ValueError("torus_extent is required with a callable sampler")
        sampler = initial
        dim = len(tuple(torus_extent))
    ext = np.array([float(L) for L in torus_extent])
    if np.any(ext <= 0):
        raise ValueError("torus extents must be positive")
    dt = horizon / n_steps
    stats = _ThinningStats()
    draw = _increment_draw(spec, dt, dim, stats)
    times = np.linspace(0.0, horizon, n_steps + 1)
    positions = np.empty((n_steps + 1, n_paths, dim))
    wraps = 0
    base_rng = np.random.Philox(seed)
    for chunk, start in enumerate(range(0, max(n_paths, 1), CHUNK)):
        if n_paths == 0:
            break
        stop = min(start + CHUNK, n_paths)
        rng = np.random.Generator(base_rng.jumped(chunk))
        x = np.asarray(sampler(rng, stop - start), dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape != (stop - start, dim):
            raise ValueError(f"sampler returned shape {x.shape}, wanted ({stop - start}, {dim})")
        out_of_box = np.abs(x) >= ext
        wraps += int(np.count_nonzero(out_of_box.any(axis=1)))
        x = (x + ext) % (2 * ext) - ext
        positions[0, start:stop] = x
        for k in range(n_steps):
            if drift is not None:
                x = x + dt * np.asarray(drift(times[k], x), dtype=float).reshape(x.shape)
            x = x + draw(rng, stop - start)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite path positions at step {k}")
            out_of_box = np.abs(x) >= ext
            wraps += int(np.count_nonzero(out_of_box.any(axis=1)))
            x = (x + ext) % (2 * ext) - ext
            positions[k + 1, start:stop] = x
    rate = wraps / (n_paths * (n_steps + 1)) if n_paths else 0.0
    if rate > 0.01:
        warnings.warn(
            f"{100 * rate:.1f}% of path-steps wrapped around the torus; "
            "the comparison box is too small for this law",
            TorusWrapWarning,
            stacklevel=2,
        )
    return PathEnsemble(
        times=times,
        positions=positions,
        seed=seed,
        torus_extent=tuple(float(L) for L in ext),
        wrap_events=wraps,
        acceptance_rate=stats.rate,
    )


def empirical_law(ensemble: PathEnsemble, time_index: int, grid: Grid) -> ProbabilityField:
    """Cell-normalized histogram of the ensemble at one time node."""
    if grid.dim != ensemble.dim:
        raise ValueError("grid and ensemble dimensions differ")
    if tuple(grid.half_extent) != ensemble.torus_extent:
        raise ValueError("grid box must match the ensemble torus")
    x = ensemble.positions[time_index]
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot histogram an empty ensemble")
    idx = []
    for ax in range(grid.dim):
        L, h, N = grid.half_extent[ax], grid.spacing[ax], grid.points[ax]
        idx.append(np.clip(((x[:, ax] + L) / h).astype(np.int64), 0, N - 1))
    flat = np.ravel_multi_index(tuple(idx), grid.shape)
    counts = np.bincount(flat, minlength=math.prod(grid.shape)).reshape(grid.shape)
    values = counts / (n * grid.cell_volume)
    return ProbabilityField(grid, values, time_tag=float(ensemble.times[time_index]))
