"""Heat semigroups e^{t L} of Levy generators, and probes of their decay laws.

The propagator is the modewise exponential of a sampled symbol. Kernel
snapshots realize the semigroup's convolution kernel on the torus, which is
the periodization of the whole-space kernel; point values, mass, positivity
ripple, smoothing rates in t, and product factorization across axes are all
observable quantities that the test suite pins against closed forms or
independent transform quadrature.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Sequence

import numpy as np

from .spectral_core import (
    Field,
    Grid,
    derivative_multiplier,
    from_spectrum,
    ifftn,
    lp_norm,
    real_part,
    to_spectrum,
)
from .levy_ops import LevySpec, Symbol, apply_operator, build_symbol


class DomainTooSmall(ValueError):
    """Kernel mass reaches the box boundary; the torus misrepresents it."""


class UnresolvedKernel(ValueError):
    """Grid cannot support the requested kernel probe at some time."""


@dataclasses.dataclass(frozen=True)
class Propagator:
    """Modewise multiplier e^{dt * symbol} advancing fields by one step."""

    symbol: Symbol
    dt: float
    values: np.ndarray

    def apply(self, field: Field) -> Field:
        if field.grid != self.symbol.grid:
            raise ValueError("field grid does not match the propagator grid")
        tag = None if field.time_tag is None else field.time_tag + self.dt
        return from_spectrum(field.grid, self.values * to_spectrum(field), tag)

    def apply_spectrum(self, spectrum: np.ndarray) -> np.ndarray:
        return self.values * spectrum


def build_propagator(symbol: Symbol, dt: float) -> Propagator:
    """e^{dt L} as a Fourier multiplier; dt = 0 is the identity map."""
    if dt < 0:
        raise ValueError(f"propagator step must be >= 0, got {dt}")
    if dt == 0:
        values = np.ones(symbol.grid.shape, dtype=complex)
    else:
        values = np.exp(dt * symbol.values)
    return Propagator(symbol, float(dt), values)


# -- kernel snapshots ----------------------------------------------------------

def _center_phase(grid: Grid) -> np.ndarray:
    """Phase moving the kernel center from index 0 to the x = 0 grid node."""
    ph = np.ones(grid.shape)
    for axis, n in enumerate(grid.points):
        shape = [1] * grid.dim
        shape[axis] = n
        ph = ph * ((-1.0) ** np.arange(n)).reshape(shape)
    return ph


def boundary_mass(grid: Grid, values: np.ndarray, fraction: float = 0.1) -> float:
    """|values| mass in the outer `fraction` band of the box (any axis)."""
    mask = np.zeros(grid.shape, dtype=bool)
    for axis, (ext, n) in enumerate(zip(grid.half_extent, grid.points)):
        x = np.abs(grid.axis_coordinates(axis))
        shape = [1] * grid.dim
        shape[axis] = n
        mask |= (x > (1 - fraction) * ext).reshape(shape)
    return float(np.sum(np.abs(values) * mask) * grid.cell_volume)


def high_frequency_share(prop: Propagator, fraction: float = 0.1) -> float:
    """Fraction of propagator spectral energy in the top frequency band."""
    grid = prop.symbol.grid
    mask = np.zeros(grid.shape, dtype=bool)
    for axis, (ext, n) in enumerate(zip(grid.half_extent, grid.points)):
        xi = np.abs(grid.axis_frequencies(axis))
        shape = [1] * grid.dim
        shape[axis] = n
        mask |= (xi > (1 - fraction) * math.pi * n / (2 * ext)).reshape(shape)
    energy = np.abs(prop.values) ** 2
    return float(energy[mask].sum() / energy.sum())


def kernel_snapshot(prop: Propagator, mass_tol: float = 1e-4) -> Field:
    """The semigroup kernel on the grid, centered at x = 0.

    Sampling the multiplier exactly realizes the periodized whole-space
    kernel, so the only quality question is whether the box holds the mass:
    more than mass_tol of it in the outer 10% band raises DomainTooSmall.
    Total mass is 1 by construction (zero mode of the symbol is 0).
    """
    grid = prop.symbol.grid
    vals = real_part(ifftn(prop.values * _center_phase(grid))) / grid.cell_volume
    total = float(vals.sum() * grid.cell_volume)
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"kernel mass {total} deviates from 1 beyond roundoff")
    edge = boundary_mass(grid, vals)
    if edge > mass_tol:
        raise DomainTooSmall(
            f"kernel puts mass {edge:.3e} in the outer band (tol {mass_tol:.1e}); "
            "enlarge the box"
        )
    return Field(grid, vals, time_tag=prop.dt)


def adjoint_reflection_gap(kernel: Field, adjoint_kernel: Field) -> float:
    """sup |K*(x) - K(-x)| over the grid; zero for exact adjoint pairs."""
    flipped = kernel.values.copy()
    for axis in range(kernel.grid.dim):
        idx = (-np.arange(kernel.grid.points[axis])) % kernel.grid.points[axis]
        flipped = np.take(flipped, idx, axis=axis)
    return float(np.max(np.abs(adjoint_kernel.values - flipped)))


def generator_step_residual(symbol: Symbol, field: Field, dt: float) -> float:
    """sup norm of (e^{dt L} u - u) / dt - L u; first order in dt."""
    prop = build_propagator(symbol, dt)
    stepped = prop.apply(field)
    drift = apply_operator(symbol, field)
    return float(
        np.max(np.abs((stepped.values - field.values) / dt - drift.values))
    )


# -- decay-law probes ----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ProbeResult:
    """One fitted decay law: log-norm against log-time over a time list."""

    label: str
    p: float
    beta: tuple[int, ...] | None
    s: float | None
    with_gradient: bool
    times: tuple[float, ...]
    norms: tuple[float, ...]
    fitted_slope: float
    theory_slope: float
    residual: float

    def rows(self):
        beta_txt = "" if self.beta is None else "|".join(map(str, self.beta))
        s_txt = "" if self.s is None else repr(float(self.s))
        p_txt = "inf" if self.p == np.inf else repr(float(self.p))
        for t, nrm in zip(self.times, self.norms):
            yield (
                self.label,
                p_txt,
                beta_txt,
                s_txt,
                repr(float(t)),
                repr(float(nrm)),
                repr(float(self.fitted_slope)),
                repr(float(self.theory_slope)),
                repr(float(self.residual)),
            )


def write_probe_csv(results: Sequence[ProbeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "spec",
                "p",
                "beta",
                "s",
                "t",
                "norm",
                "fitted_slope",
                "theory_slope",
                "residual",
            ]
        )
        for result in results:
            writer.writerows(result.rows())


def _fit_loglog(times, norms):
    slope, intercept = np.polyfit(np.log(times), np.log(norms), 1)
    resid = np.log(norms) - (slope * np.log(times) + intercept)
    return float(slope), float(np.max(np.abs(resid)))


def _guard(prop: Propagator, t: float, mass_tol: float, spectral_tol: float):
    grid = prop.symbol.grid
    kernel = real_part(ifftn(prop.values * _center_phase(grid))) / grid.cell_volume
    edge = boundary_mass(grid, kernel)
    if edge > mass_tol:
        raise UnresolvedKernel(
            f"t={t}: boundary mass {edge:.3e} exceeds {mass_tol:.1e}; box too small"
        )
    share = high_frequency_share(prop)
    if share > spectral_tol:
        raise UnresolvedKernel(
            f"t={t}: top-band spectral share {share:.3e} exceeds {spectral_tol:.1e}; "
            "grid too coarse"
        )
    return kernel


def decay_rate_probe(
    spec: LevySpec,
    grid: Grid,
    times: Sequence[float],
    p: float = 1.0,
    beta: tuple[int, ...] | None = None,
    mass_tol: float = 1e-4,
    spectral_tol: float = 1e-6,
) -> ProbeResult:
    """Fit the decay exponent of ||D^beta K(t)||_p against t.

    Self-similar scaling predicts slope -(|beta| + (1 - 1/p) d) / order.
    Each time must pass the resolution guard: boundary mass below mass_tol
    and top-band spectral energy share below spectral_tol.
    """
    beta = tuple(0 for _ in range(grid.dim)) if beta is None else tuple(beta)
    if len(beta) != grid.dim:
        raise ValueError(f"multi-index length {len(beta)} != grid dim {grid.dim}")
    if any(b < 0 for b in beta) or sum(beta) > 2:
        raise ValueError(f"multi-index {beta} outside supported range |beta| <= 2")
    symbol = build_symbol(spec, grid)
    mult = np.ones(grid.shape, dtype=complex)
    for axis, order in enumerate(beta):
        if order:
            mult = mult * derivative_multiplier(grid, axis, order)
    norms = []
    for t in times:
        prop = build_propagator(symbol, t)
        _guard(prop, t, mass_tol, spectral_tol)
        deriv = real_part(ifftn(mult * prop.values * _center_phase(grid)))
        deriv = deriv / grid.cell_volume
        norms.append(lp_norm(deriv, p, grid.cell_volume))
    slope, resid = _fit_loglog(times, norms)
    inv_p = 0.0 if p == np.inf else 1.0 / p
    theory = -(sum(beta) + (1 - inv_p) * grid.dim) / symbol.order
    return ProbeResult(
        symbol.label, p, beta, None, False,
        tuple(float(t) for t in times), tuple(norms), slope, theory, resid,
    )


def fractional_decay_probe(
    spec: LevySpec,
    grid: Grid,
    times: Sequence[float],
    s: float,
    with_gradient: bool = False,
    mass_tol: float = 1e-4,
    spectral_tol: float = 1e-6,
) -> ProbeResult:
    """Fit the L1 decay exponent of |D|^s K(t) (optionally of |D|^s grad K).

    |D|^s is the multiplier |xi|^s. Predicted slopes: -s/order, and
    -(s+1)/order with the gradient.
    """
    hi = 1.0 if with_gradient else 2.0
    if not 0 < s < hi:
        raise ValueError(f"fractional order s={s} outside (0, {hi})")
    symbol = build_symbol(spec, grid)
    frac = grid.frequency_magnitude() ** s
    norms = []
    for t in times:
        prop = build_propagator(symbol, t)
        _guard(prop, t, mass_tol, spectral_tol)
        base = frac * prop.values * _center_phase(grid)
        if with_gradient:
            sq = np.zeros(grid.shape)
            for axis in range(grid.dim):
                comp = real_part(
                    ifftn(derivative_multiplier(grid, axis, 1) * base)
                )
                sq += comp**2
            vals = np.sqrt(sq) / grid.cell_volume
        else:
            vals = real_part(ifftn(base)) / grid.cell_volume
        norms.append(lp_norm(vals, 1.0, grid.cell_volume))
    slope, resid = _fit_loglog(times, norms)
    theory = -(s + (1.0 if with_gradient else 0.0)) / symbol.order
    return ProbeResult(
        symbol.label, 1.0, None, s, with_gradient,
        tuple(float(t) for t in times), tuple(norms), slope, theory, resid,
    )
