"""Command line front end: validated run configs, solver drivers, reports.

One TOML config describes a run (generator spec, grid, horizon, couplings,
initial density, solver knobs, output policy). Each subcommand builds the
objects it needs from that config, runs a solver or diagnostic, writes the
numeric artifacts (field binaries, CSV tables, path ensembles), and emits a
JSON report whose check rows mirror the release battery format. Identical
config and seed reproduce the numeric artifacts byte for byte; wall-clock
entries live only in the report. The process exits 0 exactly when every
hard check in the report passed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import struct
import sys
import time

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from . import acceptance
from . import fp_solver as fp
from . import heat_kernel as hk
from . import hjb_solver as hjb
from . import levy_ops as lo
from . import measure_metrics as mm
from . import mfg_coupler as mfg
from . import sde_validator as sde
from .acceptance import CheckResult
from .spectral_core import (
    Field,
    Grid,
    ProbabilityField,
    read_field_binary,
    write_field_binary,
)
from .spectral_core import _FORMAT_VERSION, _MAGIC

import pathlib


class ConfigError(ValueError):
    """Config rejected; carries every violation found, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "invalid run config:\n" + "\n".join(f"  - {v}" for v in self.violations)
        )


# ---------------------------------------------------------------------------
# config sections


@dataclasses.dataclass(frozen=True)
class SpecConfig:
    variant: str = "isotropic-stable"
    order: float = 1.5
    dim: int = 1
    c: float = 1.0
    g: float = 3.0
    m: float = 5.0
    y: float = 1.5
    cutoff: float = 1.0
    orders: tuple[float, ...] = (1.4, 1.7)


@dataclasses.dataclass(frozen=True)
class GridConfig:
    half_extent: tuple[float, ...] = (8.0,)
    points: tuple[int, ...] = (256,)


@dataclasses.dataclass(frozen=True)
class CouplingConfig:
    kind: str = "none"
    amplitude: float = 0.5
    width: float = 1.0
    weight: float = 0.3


@dataclasses.dataclass(frozen=True)
class TerminalConfig:
    preset: str = "zero"
    amplitude: float = 0.3
    center: tuple[float, ...] = (0.0,)
    width: float = 1.0


@dataclasses.dataclass(frozen=True)
class InitialConfig:
    preset: str = "gaussian-bump"
    center: tuple[float, ...] = (-2.0,)
    width: float = 0.5
    centers: tuple[tuple[float, ...], ...] = ((-2.0,), (2.0,))


@dataclasses.dataclass(frozen=True)
class DriftConfig:
    kind: str = "none"
    value: tuple[float, ...] = (0.5,)
    amplitude: float = 0.5


@dataclasses.dataclass(frozen=True)
class ProblemConfig:
    horizon: float = 0.5
    hamiltonian: str = "quadratic"
    spec: SpecConfig = SpecConfig()
    grid: GridConfig = GridConfig()
    coupling: CouplingConfig = CouplingConfig(kind="gaussian-kernel")
    terminal_coupling: CouplingConfig = CouplingConfig(kind="none")
    terminal: TerminalConfig = TerminalConfig()
    m0: InitialConfig = InitialConfig()
    drift: DriftConfig = DriftConfig()


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 16
    scheme: str = "damped-picard"
    damping: float = 0.5
    tol_d0: float = 1e-4
    max_outer: int = 40
    epsilon_schedule: tuple[float, ...] = ()


@dataclasses.dataclass(frozen=True)
class DiagnosticsConfig:
    checks: tuple[str, ...] = ()


@dataclasses.dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs"
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class RunConfig:
    problem: ProblemConfig = ProblemConfig()
    solver: SolverConfig = SolverConfig()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    output: OutputConfig = OutputConfig()


# ---------------------------------------------------------------------------
# parsing and validation

_SPEC_VARIANTS = {
    "isotropic-stable": ("variant", "order", "dim"),
    "tempered-stable": ("variant", "c", "g", "m", "y"),
    "truncated-stable": ("variant", "order", "cutoff", "dim"),
    "anisotropic-sum": ("variant", "orders"),
}
_COUPLING_KINDS = {
    "none": ("kind",),
    "gaussian-kernel": ("kind", "amplitude", "width"),
    "local-linear": ("kind", "weight"),
}
_TERMINAL_PRESETS = {
    "zero": ("preset",),
    "cosine": ("preset", "amplitude"),
    "gaussian-bump": ("preset", "amplitude", "center", "width"),
}
_INITIAL_PRESETS = {
    "gaussian-bump": ("preset", "center", "width"),
    "uniform": ("preset",),
    "two-bumps": ("preset", "centers", "width"),
}
_DRIFT_KINDS = {
    "none": ("kind",),
    "constant": ("kind", "value"),
    "cosine": ("kind", "amplitude"),
}
_HAMILTONIAN_PRESETS = ("quadratic", "eikonal", "zero")
_SCHEMES = ("damped-picard", "fictitious-play")


class _Validator:
    """Pulls typed values out of raw TOML tables, accumulating violations."""

    def __init__(self):
        self.errors: list[str] = []

    def fail(self, path: str, message: str) -> None:
        self.errors.append(f"{path}: {message}")

    def table(self, parent: dict, key: str, path: str) -> dict:
        raw = parent.get(key, {})
        if not isinstance(raw, dict):
            self.fail(path, f"expected a table, got {type(raw).__name__}")
            return {}
        return raw

    def reject_unknown(self, table: dict, allowed, path: str) -> None:
        for key in sorted(set(table) - set(allowed)):
            self.fail(f"{path}.{key}", "unknown key")

    def _scalar(self, value, kind, path):
        if kind is float and isinstance(value, bool):
            self.fail(path, "expected a number, got a boolean")
            return None
        if kind is float and isinstance(value, int):
            value = float(value)
        if kind is int and isinstance(value, bool):
            self.fail(path, "expected an integer, got a boolean")
            return None
        if not isinstance(value, kind):
            self.fail(path, f"expected {kind.__name__}, got {type(value).__name__}")
            return None
        return value

    def value(self, table, key, path, kind, default, check=None):
        if key not in table:
            return default
        got = self._scalar(table[key], kind, f"{path}.{key}")
        if got is None:
            return default
        if check is not None:
            msg = check(got)
            if msg:
                self.fail(f"{path}.{key}", msg)
                return default
        return got

    def sequence(self, table, key, path, kind, default, check=None,
                 allow_scalar=True, length=None):
        """A homogeneous tuple; a bare scalar is read as a length-1 tuple."""
        if key not in table:
            return default
        raw = table[key]
        if not isinstance(raw, (list, tuple)):
            if not allow_scalar:
                self.fail(f"{path}.{key}", "expected a list")
                return default
            raw = [raw]
        out = []
        for i, item in enumerate(raw):
            got = self._scalar(item, kind, f"{path}.{key}[{i}]")
            if got is None:
                return default
            if check is not None:
                msg = check(got)
                if msg:
                    self.fail(f"{path}.{key}[{i}]", msg)
                    return default
            out.append(got)
        if not out:
            self.fail(f"{path}.{key}", "list must not be empty")
            return default
        if length is not None and len(out) != length:
            self.fail(f"{path}.{key}", f"expected {length} entries, got {len(out)}")
            return default
        return tuple(out)


def _open_interval(lo_, hi_):
    def check(v):
        if not lo_ < v < hi_:
            return f"{v} outside the open interval ({lo_}, {hi_})"
    return check


def _positive(v):
    if v <= 0:
        return f"{v} is not positive"


def _nonnegative(v):
    if v < 0:
        return f"{v} is negative"


def _power_of_two(v):
    if v < 2 or v & (v - 1):
        return f"{v} is not a power of two >= 2"


def _damping(v):
    if not 0 < v <= 1:
        return f"{v} outside the half-open interval (0, 1]"


def _choice(options):
    def check(v):
        if v not in options:
            return f"{v!r} is not one of {sorted(options)}"
    return check


def _parse_spec(val: _Validator, table: dict, path: str) -> SpecConfig:
    variant = val.value(table, "variant", path, str, "isotropic-stable",
                        _choice(_SPEC_VARIANTS))
    allowed = _SPEC_VARIANTS.get(variant, ("variant",))
    val.reject_unknown(table, allowed, path)
    kw = {"variant": variant}
    order_check = _open_interval(1, 2)
    if "order" in allowed:
        kw["order"] = val.value(table, "order", path, float, 1.5, order_check)
    if "dim" in allowed:
        kw["dim"] = val.value(table, "dim", path, int, 1, _choice((1, 2)))
    if variant == "tempered-stable":
        kw["c"] = val.value(table, "c", path, float, 1.0, _positive)
        kw["g"] = val.value(table, "g", path, float, 3.0, _positive)
        kw["m"] = val.value(table, "m", path, float, 5.0, _positive)
        kw["y"] = val.value(table, "y", path, float, 1.5, order_check)
    if variant == "truncated-stable":
        kw["cutoff"] = val.value(table, "cutoff", path, float, 1.0, _positive)
    if variant == "anisotropic-sum":
        kw["orders"] = val.sequence(table, "orders", path, float, (1.4, 1.7),
                                    order_check, allow_scalar=False)
        if not 1 <= len(kw["orders"]) <= 2:
            val.fail(f"{path}.orders", "supports one or two axes")
    return SpecConfig(**kw)


def _parse_coupling(val, table, path, default_kind) -> CouplingConfig:
    kind = val.value(table, "kind", path, str, default_kind,
                     _choice(_COUPLING_KINDS))
    allowed = _COUPLING_KINDS.get(kind, ("kind",))
    val.reject_unknown(table, allowed, path)
    kw = {"kind": kind}
    if kind == "gaussian-kernel":
        kw["amplitude"] = val.value(table, "amplitude", path, float, 0.5)
        kw["width"] = val.value(table, "width", path, float, 1.0, _positive)
    if kind == "local-linear":
        kw["weight"] = val.value(table, "weight", path, float, 0.3, _nonnegative)
    return CouplingConfig(**kw)


def _parse_problem(val: _Validator, table: dict) -> ProblemConfig:
    path = "problem"
    val.reject_unknown(
        table,
        ("horizon", "hamiltonian", "spec", "grid", "coupling",
         "terminal_coupling", "terminal", "m0", "drift"),
        path,
    )
    horizon = val.value(table, "horizon", path, float, 0.5, _positive)
    ham = val.value(table, "hamiltonian", path, str, "quadratic",
                    _choice(_HAMILTONIAN_PRESETS))
    spec = _parse_spec(val, val.table(table, "spec", f"{path}.spec"),
                       f"{path}.spec")

    gtab = val.table(table, "grid", f"{path}.grid")
    val.reject_unknown(gtab, ("half_extent", "points"), f"{path}.grid")
    half = val.sequence(gtab, "half_extent", f"{path}.grid", float, (8.0,),
                        _positive)
    pts = val.sequence(gtab, "points", f"{path}.grid", int, (256,),
                       _power_of_two)
    if len(half) == 1 and len(pts) > 1:
        half = half * len(pts)
    if len(pts) == 1 and len(half) > 1:
        pts = pts * len(half)
    if len(half) != len(pts):
        val.fail(f"{path}.grid", f"half_extent has {len(half)} axes but "
                 f"points has {len(pts)}")
    spec_dim = len(spec.orders) if spec.variant == "anisotropic-sum" else (
        1 if spec.variant == "tempered-stable" else spec.dim)
    if len(pts) != spec_dim:
        val.fail(f"{path}.grid.points",
                 f"grid dimension {len(pts)} does not match the "
                 f"{spec_dim}-dimensional generator spec")
    grid = GridConfig(half, pts)

    coupling = _parse_coupling(
        val, val.table(table, "coupling", f"{path}.coupling"),
        f"{path}.coupling", "gaussian-kernel")
    terminal_coupling = _parse_coupling(
        val, val.table(table, "terminal_coupling", f"{path}.terminal_coupling"),
        f"{path}.terminal_coupling", "none")

    ttab = val.table(table, "terminal", f"{path}.terminal")
    tpreset = val.value(ttab, "preset", f"{path}.terminal", str, "zero",
                        _choice(_TERMINAL_PRESETS))
    val.reject_unknown(ttab, _TERMINAL_PRESETS.get(tpreset, ("preset",)),
                       f"{path}.terminal")
    tkw = {"preset": tpreset}
    if tpreset in ("cosine", "gaussian-bump"):
        tkw["amplitude"] = val.value(ttab, "amplitude", f"{path}.terminal",
                                     float, 0.3)
    if tpreset == "gaussian-bump":
        tkw["center"] = val.sequence(ttab, "center", f"{path}.terminal",
                                     float, (0.0,) * spec_dim,
                                     length=spec_dim)
        tkw["width"] = val.value(ttab, "width", f"{path}.terminal", float,
                                 1.0, _positive)
    terminal = TerminalConfig(**tkw)

    mtab = val.table(table, "m0", f"{path}.m0")
    mpreset = val.value(mtab, "preset", f"{path}.m0", str, "gaussian-bump",
                        _choice(_INITIAL_PRESETS))
    val.reject_unknown(mtab, _INITIAL_PRESETS.get(mpreset, ("preset",)),
                       f"{path}.m0")
    mkw = {"preset": mpreset}
    if mpreset == "gaussian-bump":
        mkw["center"] = val.sequence(mtab, "center", f"{path}.m0", float,
                                     (-2.0,) * spec_dim, length=spec_dim)
        mkw["width"] = val.value(mtab, "width", f"{path}.m0", float, 0.5,
                                 _positive)
    if mpreset == "two-bumps":
        raw = mtab.get("centers", [[-2.0], [2.0]])
        centers = []
        if not isinstance(raw, (list, tuple)) or len(raw) != 2:
            val.fail(f"{path}.m0.centers", "expected a list of two centers")
        else:
            for i, c in enumerate(raw):
                one = val.sequence({"c": c}, "c", f"{path}.m0.centers[{i}]",
                                   float, (0.0,) * spec_dim, length=spec_dim)
                centers.append(one)
        if centers:
            mkw["centers"] = tuple(centers)
        mkw["width"] = val.value(mtab, "width", f"{path}.m0", float, 0.5,
                                 _positive)
    m0 = InitialConfig(**mkw)

    dtab = val.table(table, "drift", f"{path}.drift")
    dkind = val.value(dtab, "kind", f"{path}.drift", str, "none",
                      _choice(_DRIFT_KINDS))
    val.reject_unknown(dtab, _DRIFT_KINDS.get(dkind, ("kind",)),
                       f"{path}.drift")
    dkw = {"kind": dkind}
    if dkind == "constant":
        dkw["value"] = val.sequence(dtab, "value", f"{path}.drift", float,
                                    (0.5,) * spec_dim, length=spec_dim)
    if dkind == "cosine":
        dkw["amplitude"] = val.value(dtab, "amplitude", f"{path}.drift",
                                     float, 0.5)
    drift = DriftConfig(**dkw)

    return ProblemConfig(horizon, ham, spec, grid, coupling,
                         terminal_coupling, terminal, m0, drift)


def _parse_solver(val: _Validator, table: dict) -> SolverConfig:
    path = "solver"
    val.reject_unknown(table, ("n_steps", "scheme", "damping", "tol_d0",
                               "max_outer", "epsilon_schedule"), path)
    eps = val.sequence(table, "epsilon_schedule", path, float, (),
                       _positive, allow_scalar=False)
    if len(eps) > 1 and any(b >= a for a, b in zip(eps, eps[1:])):
        val.fail(f"{path}.epsilon_schedule", "widths must strictly decrease")
    return SolverConfig(
        n_steps=val.value(table, "n_steps", path, int, 16, _positive),
        scheme=val.value(table, "scheme", path, str, "damped-picard",
                         _choice(_SCHEMES)),
        damping=val.value(table, "damping", path, float, 0.5, _damping),
        tol_d0=val.value(table, "tol_d0", path, float, 1e-4, _positive),
        max_outer=val.value(table, "max_outer", path, int, 40, _positive),
        epsilon_schedule=eps,
    )


def parse_config(text: str) -> RunConfig:
    """TOML text -> validated RunConfig; unknown keys and out-of-range
    values are all reported at once."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"config: {exc}"]) from exc
    val = _Validator()
    val.reject_unknown(raw, ("problem", "solver", "diagnostics", "output"), "config")
    problem = _parse_problem(val, val.table(raw, "problem", "problem"))
    solver = _parse_solver(val, val.table(raw, "solver", "solver"))

    dtab = val.table(raw, "diagnostics", "diagnostics")
    val.reject_unknown(dtab, ("checks",), "diagnostics")
    checks = val.sequence(dtab, "checks", "diagnostics", str, (),
                          _choice(tuple(acceptance.CHECKS)),
                          allow_scalar=False)
    diagnostics = DiagnosticsConfig(checks)

    otab = val.table(raw, "output", "output")
    val.reject_unknown(otab, ("directory", "seed"), "output")
    output = OutputConfig(
        directory=val.value(otab, "directory", "output", str, "runs"),
        seed=val.value(otab, "seed", "output", int, 0, _nonnegative),
    )
    if val.errors:
        raise ConfigError(val.errors)
    return RunConfig(problem, solver, diagnostics, output)


def load_config(path) -> RunConfig:
    return parse_config(pathlib.Path(path).read_text())


# ---------------------------------------------------------------------------
# echo serialization

def _fmt(value) -> str:
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot format {type(value).__name__} for config echo")


def echo_config(cfg: RunConfig) -> str:
    """RunConfig -> TOML text; parse_config(echo_config(c)) == c."""
    p, s = cfg.problem, cfg.problem.spec
    lines = ["[problem]",
             f"horizon = {_fmt(p.horizon)}",
             f"hamiltonian = {_fmt(p.hamiltonian)}",
             "", "[problem.spec]"]
    for key in _SPEC_VARIANTS[s.variant]:
        lines.append(f"{key} = {_fmt(getattr(s, key))}")
    lines += ["", "[problem.grid]",
              f"half_extent = {_fmt(p.grid.half_extent)}",
              f"points = {_fmt(p.grid.points)}"]
    for name, c in (("coupling", p.coupling),
                    ("terminal_coupling", p.terminal_coupling)):
        lines += ["", f"[problem.{name}]"]
        for key in _COUPLING_KINDS[c.kind]:
            lines.append(f"{key} = {_fmt(getattr(c, key))}")
    lines += ["", "[problem.terminal]"]
    for key in _TERMINAL_PRESETS[p.terminal.preset]:
        lines.append(f"{key} = {_fmt(getattr(p.terminal, key))}")
    lines += ["", "[problem.m0]"]
    for key in _INITIAL_PRESETS[p.m0.preset]:
        lines.append(f"{key} = {_fmt(getattr(p.m0, key))}")
    lines += ["", "[problem.drift]"]
    for key in _DRIFT_KINDS[p.drift.kind]:
        lines.append(f"{key} = {_fmt(getattr(p.drift, key))}")
    sol = cfg.solver
    lines += ["", "[solver]",
              f"n_steps = {_fmt(sol.n_steps)}",
              f"scheme = {_fmt(sol.scheme)}",
              f"damping = {_fmt(sol.damping)}",
              f"tol_d0 = {_fmt(sol.tol_d0)}",
              f"max_outer = {_fmt(sol.max_outer)}"]
    if sol.epsilon_schedule:
        lines.append(f"epsilon_schedule = {_fmt(sol.epsilon_schedule)}")
    lines += ["", "[diagnostics]"]
    if cfg.diagnostics.checks:
        lines.append(f"checks = {_fmt(cfg.diagnostics.checks)}")
    lines += ["", "[output]",
              f"directory = {_fmt(cfg.output.directory)}",
              f"seed = {_fmt(cfg.output.seed)}", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# building runtime objects

def build_grid(cfg: RunConfig) -> Grid:
    g = cfg.problem.grid
    return Grid.regular(g.half_extent, g.points)


def build_spec(cfg: RunConfig) -> lo.LevySpec:
    s = cfg.problem.spec
    if s.variant == "isotropic-stable":
        return lo.IsotropicStable(s.order, dim=s.dim)
    if s.variant == "tempered-stable":
        return lo.TemperedStable1D(s.c, s.g, s.m, s.y)
    if s.variant == "truncated-stable":
        return lo.TruncatedStable(s.order, s.cutoff, dim=s.dim)
    return lo.AnisotropicSum(
        tuple((axis, lo.IsotropicStable(order))
              for axis, order in enumerate(s.orders)),
        dim=len(s.orders),
    )


def _gaussian_kernel(grid: Grid, amplitude: float, width: float) -> Field:
    mesh = grid.coordinate_mesh()
    r2 = sum(x**2 for x in mesh)
    return Field(grid, amplitude * np.exp(-r2 / (2.0 * width**2)))


def build_coupling(section: CouplingConfig, grid: Grid):
    if section.kind == "none":
        return None
    if section.kind == "gaussian-kernel":
        return mfg.NonlocalCoupling(
            _gaussian_kernel(grid, section.amplitude, section.width))
    weight = section.weight
    return mfg.LocalCoupling(lambda mesh, k: weight * k)


def build_hamiltonian(cfg: RunConfig) -> hjb.Hamiltonian:
    return {
        "quadratic": hjb.quadratic_hamiltonian,
        "eikonal": hjb.eikonal_hamiltonian,
        "zero": hjb.zero_hamiltonian,
    }[cfg.problem.hamiltonian]()


def build_terminal(cfg: RunConfig, grid: Grid) -> Field:
    t = cfg.problem.terminal
    if t.preset == "zero":
        return Field(grid, np.zeros(grid.shape))
    mesh = grid.coordinate_mesh()
    if t.preset == "cosine":
        vals = t.amplitude * np.prod(
            [np.cos(np.pi * x / e) for x, e in zip(mesh, grid.half_extent)],
            axis=0)
        return Field(grid, vals)
    r2 = sum((x - c)**2 for x, c in zip(mesh, t.center))
    return Field(grid, t.amplitude * np.exp(-r2 / (2.0 * t.width**2)))


def build_initial(cfg: RunConfig, grid: Grid) -> ProbabilityField:
    m = cfg.problem.m0
    if m.preset == "uniform":
        return ProbabilityField.normalized(grid, np.ones(grid.shape))
    mesh = grid.coordinate_mesh()
    if m.preset == "gaussian-bump":
        r2 = sum((x - c)**2 for x, c in zip(mesh, m.center))
        return ProbabilityField.normalized(grid, np.exp(-r2 / (2.0 * m.width**2)))
    vals = np.zeros(grid.shape)
    for center in m.centers:
        r2 = sum((x - c)**2 for x, c in zip(mesh, center))
        vals += np.exp(-r2 / (2.0 * m.width**2))
    return ProbabilityField.normalized(grid, vals)


def build_fp_drift(cfg: RunConfig, grid: Grid):
    """Drift as the forward solver wants it: (t, mesh) -> per-axis arrays."""
    d = cfg.problem.drift
    if d.kind == "none":
        return None
    if d.kind == "constant":
        value = d.value
        return lambda t, mesh: tuple(
            np.full(mesh[0].shape, v) for v in value)
    amp = d.amplitude
    return lambda t, mesh: tuple(amp * np.cos(x) for x in mesh)


def build_sde_drift(cfg: RunConfig):
    """Drift as the path sampler wants it: (t, x[n, d]) -> array[n, d]."""
    d = cfg.problem.drift
    if d.kind == "none":
        return None
    if d.kind == "constant":
        value = np.asarray(d.value)
        return lambda t, x: np.broadcast_to(value, x.shape)
    amp = d.amplitude
    return lambda t, x: amp * np.cos(x)


# ---------------------------------------------------------------------------
# reports

def _round_trip_guard(cfg: RunConfig) -> str:
    echo = echo_config(cfg)
    if parse_config(echo) != cfg:
        raise RuntimeError("config echo failed to round-trip; refusing to "
                           "write a report that cannot reproduce the run")
    return echo


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    return value


def _check_row(res: CheckResult) -> dict:
    return {
        "name": res.name,
        "reference": res.reference,
        "measured": _jsonable(res.measured),
        "bound": _jsonable(res.bound),
        "direction": res.direction,
        "status": res.status,
        "detail": _jsonable(res.detail),
        "runtime_seconds": round(res.runtime, 3),
    }


def build_report(command: str, cfg: RunConfig, checks, series=None,
                 artifacts=(), started=None) -> dict:
    """Assemble the JSON run report. Wall-clock fields are the only part
    allowed to differ between reruns of the same config and seed."""
    return {
        "command": command,
        "package": "levymfg",
        "versions": {
            "levymfg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "generated_unix_time": time.time(),
        "elapsed_seconds": None if started is None else round(time.time() - started, 3),
        "config_echo": _round_trip_guard(cfg),
        "checks": [_check_row(c) for c in checks],
        "series": _jsonable(series or {}),
        "artifacts": sorted(artifacts),
        "hard_failures": [c.name for c in checks if c.hard and not c.passed],
    }


def _write_report(outdir: pathlib.Path, report: dict) -> pathlib.Path:
    path = outdir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _exit_code(report: dict) -> int:
    return 1 if report["hard_failures"] else 0


def _fmt6(value) -> str:
    return f"{value:.6g}" if isinstance(value, (int, float)) else str(value)


def _print_checks(report: dict, stream=None) -> None:
    stream = stream or sys.stdout
    for row in report["checks"]:
        tag = row["status"].upper()
        print(f"[{tag}] {row['name']}: {_fmt6(row['measured'])} "
              f"{row['direction']} {_fmt6(row['bound'])}", file=stream)


def _result(name, reference, measured, bound, direction="<=", hard=True,
            detail=None) -> CheckResult:
    passed = (measured <= bound) if direction == "<=" else (measured >= bound)
    return CheckResult(name, reference, float(measured), float(bound),
                       bool(passed), direction, hard, detail or {})


# ---------------------------------------------------------------------------
# trajectory and ensemble artifacts

def _write_trajectory(outdir: pathlib.Path, stem: str, times, fields) -> list[str]:
    names = []
    for k, field in enumerate(fields):
        name = f"{stem}_{k:04d}.bin"
        tagged = Field(field.grid, field.values, time_tag=float(times[k]))
        write_field_binary(outdir / name, tagged)
        names.append(name)
    return names


def write_ensemble_binary(path, ensemble: sde.PathEnsemble) -> None:
    """Path block with the field-binary header grammar: magic, version,
    rank, per-axis sizes, per-axis extents, tag, then row-major float64.
    Axes are (time node, path, coordinate); the coordinate extent records
    the torus half width."""
    pos = np.ascontiguousarray(ensemble.positions, dtype="<f8")
    n_nodes, n_paths, dim = pos.shape
    extents = (float(ensemble.times[-1]), 0.0,
               float(max(ensemble.torus_extent)))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MAGIC, _FORMAT_VERSION, 3))
        fh.write(struct.pack("<3I", n_nodes, n_paths, dim))
        fh.write(struct.pack("<3d", *extents))
        fh.write(struct.pack("<d", float(ensemble.times[-1])))
        fh.write(pos.tobytes())


def read_ensemble_binary(path) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse of write_ensemble_binary: (times, positions, torus half width)."""
    with open(path, "rb") as fh:
        magic, version, rank = struct.unpack("<4sII", fh.read(12))
        if magic != _MAGIC or version != _FORMAT_VERSION or rank != 3:
            raise ValueError(f"not a path-ensemble file: {path}")
        shape = struct.unpack("<3I", fh.read(12))
        extents = struct.unpack("<3d", fh.read(24))
        struct.unpack("<d", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
    times = np.linspace(0.0, extents[0], shape[0])
    return times, data, extents[2]


# ---------------------------------------------------------------------------
# subcommands

def cmd_solve_hjb(cfg: RunConfig, outdir: pathlib.Path) -> dict:
    started = time.time()
    grid = build_grid(cfg)
    symbol = lo.build_symbol(build_spec(cfg), grid)
    inp = hjb.HJBInput(
        hamiltonian=build_hamiltonian(cfg),
        terminal=build_terminal(cfg, grid),
        symbol=symbol,
        horizon=cfg.problem.horizon,
        n_steps=cfg.solver.n_steps,
    )
    sol = hjb.solve_hjb_backward(inp)
    artifacts = _write_trajectory(outdir, "u", sol.times, sol.fields)
    sup = hjb.sup_bound_diagnostic(sol)
    lip = hjb.lipschitz_diagnostic(sol)
    strong = hjb.strong_form_residual(sol)
    checks = [
        _result("sup-norm-bound", "terminal sup norm plus source growth",
                sup["max_sup_norm"], sup["bound"], detail=sup),
        _result("lipschitz-bound", "gradient bound from the regularized data",
                lip["max_gradient_norm"], lip["m_t_bound"], detail=lip),
        _result("strong-form-residual", "pointwise equation defect",
                strong["max"], np.inf, hard=False),
        _result("duhamel-residual", "mild-form defect of the accepted sweeps",
                max(sol.duhamel_residuals), np.inf, hard=False),
    ]
    series = {
        "times": sol.times,
        "duhamel_residuals": sol.duhamel_residuals,
        "contraction_ratios": sol.contraction_ratios,
        "picard_sweeps": sol.picard_sweeps,
        "window_bisections": sol.bisections,
        "strong_form_residuals": strong["values"],
    }
    report = build_report("solve-hjb", cfg, checks, series, artifacts, started)
    _write_report(outdir, report)
    return report


def cmd_solve_fp(cfg: RunConfig, outdir: pathlib.Path) -> dict:
    started = time.time()
    grid = build_grid(cfg)
    spec = build_spec(cfg)
    symbol = lo.build_symbol(spec, grid)
    m0 = build_initial(cfg, grid)
    sol = fp.solve_fp_forward(fp.FPInput(
        initial=m0,
        symbol=symbol,
        horizon=cfg.problem.horizon,
        n_steps=cfg.solver.n_steps,
        drift=build_fp_drift(cfg, grid),
    ))
    artifacts = _write_trajectory(outdir, "m", sol.times, sol.fields)

    masses = [float(f.values.sum() * grid.cell_volume) for f in sol.fields]
    minima = [float(f.values.min()) for f in sol.fields]
    peak = max(float(f.values.max()) for f in sol.fields)
    probe = fp.d0_equicontinuity_probe(sol)
    tail = fp.lyapunov_tail_check(sol, fp.log_tail_function(), spec)
    mass_tol = 1e-8 * max(1.0, cfg.solver.n_steps / 100.0)

    checks = [
        _result("mass-defect", "per-step projection keeps unit mass",
                max(sol.mass_defects), mass_tol,
                detail={"per_step_budget": 1e-10}),
        _result("positivity-defect", "undershoot small against the peak",
                max(sol.positivity_defects), 1e-6 * peak,
                detail={"peak_density": peak}),
        _result("lyapunov-tail", "log-moment growth within the tail budget",
                max(tail["lhs_series"]), tail["rhs"], hard=tail["run_valid"],
                detail={k: tail[k] for k in
                        ("rhs", "mu_tail_integral", "outer_band_mass",
                         "run_valid")}),
        _result("d0-time-continuity", "flat-metric modulus along the flow",
                probe["fitted_exponent"], probe["theory_exponent"] - 0.1,
                direction=">=", hard=False,
                detail={"fitted_exponent": probe["fitted_exponent"],
                        "theory_exponent": probe["theory_exponent"]}),
    ]
    series = {
        "times": sol.times,
        "mass": masses,
        "min_density": minima,
        "mass_defects": sol.mass_defects,
        "positivity_defects": sol.positivity_defects,
        "clipped_mass": sol.clipped_mass,
        "d0_pairs": probe["pairs"],
        "lyapunov_lhs": tail["lhs_series"],
        "lyapunov_rhs": tail["rhs"],
    }
    report = build_report("solve-fp", cfg, checks, series, artifacts, started)
    _write_report(outdir, report)
    return report


def _write_residual_csv(path, sol: mfg.MFGSolution) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,residual,theta\n")
        for k, (r, th) in enumerate(zip(sol.residuals, sol.theta_history)):
            fh.write(f"{k},{r!r},{th!r}\n")


def cmd_solve_mfg(cfg: RunConfig, outdir: pathlib.Path,
                  seed_profile: str = "initial",
                  epsilon_schedule=None) -> dict:
    started = time.time()
    grid = build_grid(cfg)
    symbol = lo.build_symbol(build_spec(cfg), grid)
    coupling = build_coupling(cfg.problem.coupling, grid)
    terminal_coupling = build_coupling(cfg.problem.terminal_coupling, grid)
    prob = mfg.MFGProblem(
        hamiltonian=build_hamiltonian(cfg),
        coupling=coupling,
        terminal_coupling=terminal_coupling,
        initial=build_initial(cfg, grid),
        symbol=symbol,
        horizon=cfg.problem.horizon,
        n_steps=cfg.solver.n_steps,
        iteration=mfg.IterationConfig(
            scheme=cfg.solver.scheme,
            theta=cfg.solver.damping,
            tol_d0=cfg.solver.tol_d0,
            max_outer=cfg.solver.max_outer,
        ),
    )
    schedule = tuple(epsilon_schedule or cfg.solver.epsilon_schedule)
    local = any(isinstance(c, mfg.LocalCoupling)
                for c in (coupling, terminal_coupling) if c is not None)
    if local:
        if not schedule:
            raise ValueError(
                "pointwise couplings need a mollification schedule; pass "
                "--epsilon-schedule or set solver.epsilon_schedule")
        sol = mfg.solve_mfg_local(prob, schedule, seed=seed_profile)
    else:
        sol = mfg.solve_mfg(prob, seed=seed_profile)

    artifacts = _write_trajectory(outdir, "u", prob.times, sol.u_fields)
    artifacts += _write_trajectory(outdir, "m", prob.times, sol.m_fields)
    _write_residual_csv(outdir / "residuals.csv", sol)
    artifacts.append("residuals.csv")

    checks = [
        _result("outer-converged", "residual below the fixed-point tolerance",
                sol.final_residual, cfg.solver.tol_d0,
                detail={"n_outer": sol.n_outer,
                        "converged": sol.converged,
                        "scheme": cfg.solver.scheme}),
    ]
    monotone = [c.monotone for c in (coupling, terminal_coupling)
                if c is not None]
    series = {
        "residuals": sol.residuals,
        "theta_history": sol.theta_history,
        "seed_profile": seed_profile,
        "epsilon_schedule": schedule,
        "couplings_monotone": monotone,
        "diagnostics": sol.diagnostics,
    }
    report = build_report("solve-mfg", cfg, checks, series, artifacts, started)
    _write_report(outdir, report)
    return report


def cmd_simulate_sde(cfg: RunConfig, outdir: pathlib.Path, n_paths: int,
                     seed: int) -> dict:
    started = time.time()
    grid = build_grid(cfg)
    spec = build_spec(cfg)
    if not sde.is_simulable(spec):
        raise ValueError(f"no exact increment sampler for {spec.label}")
    m0 = build_initial(cfg, grid)
    ensemble = sde.simulate_controlled_sde(
        spec, m0, cfg.problem.horizon, cfg.solver.n_steps, n_paths,
        drift=build_sde_drift(cfg), seed=seed,
        torus_extent=grid.half_extent,
    )
    write_ensemble_binary(outdir / "paths.bin", ensemble)
    wrap_rate = ensemble.wrap_events / max(1, n_paths * cfg.solver.n_steps)
    checks = [
        _result("torus-wrap-rate", "box wide enough for law comparison",
                wrap_rate, 0.01,
                detail={"wrap_events": int(ensemble.wrap_events)}),
    ]
    series = {
        "times": ensemble.times,
        "seed": seed,
        "n_paths": n_paths,
        "acceptance_rate": ensemble.acceptance_rate,
        "final_mean": ensemble.positions[-1].mean(axis=0),
        "final_abs_deviation": np.abs(
            ensemble.positions[-1]
            - np.median(ensemble.positions[-1], axis=0)).mean(axis=0),
    }
    report = build_report("simulate-sde", cfg, checks, series,
                          ["paths.bin"], started)
    _write_report(outdir, report)
    return report


def _load_measure(path) -> mm.DiscreteMeasure:
    """A measure from a field binary (grid support, pooled deterministically)
    or from a CSV point list with columns x1..xd,weight."""
    path = pathlib.Path(path)
    if path.suffix == ".csv":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.shape[1] < 2:
            raise ValueError(f"{path}: need coordinate columns plus a weight")
        return mm.DiscreteMeasure.from_points(rows[:, :-1], rows[:, -1])
    return mm.DiscreteMeasure.from_field(read_field_binary(path))


def _union_support(a: mm.DiscreteMeasure, b: mm.DiscreteMeasure):
    """Re-express two point lists on their concatenated support so the
    metric solver sees a shared space. Torus wraps must agree."""
    if (a.torus_extent is None) != (b.torus_extent is None):
        raise ValueError("cannot mix a torus measure with a free-space one")
    points = np.vstack([a.points, b.points])
    wa = np.concatenate([a.weights, np.zeros(len(b.points))])
    wb = np.concatenate([np.zeros(len(a.points)), b.weights])
    return (mm.DiscreteMeasure.from_points(points, wa, a.torus_extent),
            mm.DiscreteMeasure.from_points(points, wb, b.torus_extent))


def cmd_metric_d0(path_a, path_b, method: str = "exact-lp") -> dict:
    started = time.time()
    a = _load_measure(path_a)
    b = _load_measure(path_b)
    if a.points.shape != b.points.shape or not np.array_equal(a.points, b.points):
        a, b = _union_support(a, b)
    res = mm.d0_distance(a, b, method=method)
    report = {
        "command": "metric-d0",
        "method": method,
        "value": float(res.value),
        "lower": float(res.lower),
        "upper": float(res.upper),
        "n_points": int(len(a.points)),
        "elapsed_seconds": round(time.time() - started, 3),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


_PROBE_TIMES = (0.5, 1.0, 2.0, 4.0)


def _probe_layout(spec) -> tuple[Grid, float]:
    if spec.dim == 1:
        return Grid.regular(1024.0, 8192), 1e-3
    return Grid.regular(64.0, (1024, 1024)), 3e-2


def cmd_kernel_probe(cfg: RunConfig, outdir: pathlib.Path) -> dict:
    """Decay-rate table for the configured generator: four Lebesgue/derivative
    norms plus two fractional-smoothness norms, each with its fitted and
    predicted slope."""
    started = time.time()
    spec = build_spec(cfg)
    grid, mass_tol = _probe_layout(spec)
    dim = spec.dim
    results = []
    for p, db in ((1.0, 0), (1.0, 1), (2.0, 0), (np.inf, 0)):
        beta = (db,) + (0,) * (dim - 1) if db else None
        results.append(hk.decay_rate_probe(spec, grid, _PROBE_TIMES, p=p,
                                           beta=beta, mass_tol=mass_tol))
    if dim == 1:
        results.append(hk.fractional_decay_probe(
            spec, grid, _PROBE_TIMES, s=0.75, mass_tol=mass_tol))
        results.append(hk.fractional_decay_probe(
            spec, grid, _PROBE_TIMES, s=0.5, with_gradient=True,
            mass_tol=mass_tol))
    hk.write_probe_csv(results, outdir / "probes.csv")
    worst = max(abs(r.fitted_slope - r.theory_slope) for r in results)
    checks = [
        _result("decay-slope-gap", "fitted heat-kernel slopes match theory",
                worst, 0.05,
                detail={r.label + f" p={r.p}": r.residual for r in results}),
    ]
    series = {
        "rows": [dict(zip(("spec", "p", "beta", "s", "t", "norm",
                           "fitted_slope", "theory_slope", "residual"), row))
                 for r in results for row in r.rows()],
    }
    report = build_report("kernel-probe", cfg, checks, series,
                          ["probes.csv"], started)
    _write_report(outdir, report)
    return report


def cmd_check_all(cfg: RunConfig, outdir: pathlib.Path) -> dict:
    started = time.time()
    names = cfg.diagnostics.checks or None
    results = acceptance.run_battery(
        names, progress=lambda r: print(r.line(), flush=True))
    report = build_report("check-all", cfg, results, started=started)
    _write_report(outdir, report)
    return report


# ---------------------------------------------------------------------------
# entry point

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmfg",
        description="Spectral solvers and diagnostics for Levy-driven "
                    "mean field games.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, out_required=True):
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--out", required=out_required,
                       help="output directory (default: output.directory)")

    with_config(sub.add_parser(
        "solve-hjb", help="backward value-function solve with bound checks"))
    with_config(sub.add_parser(
        "solve-fp", help="forward density solve with conservation checks"))
    p = sub.add_parser("solve-mfg", help="coupled fixed-point solve")
    with_config(p)
    p.add_argument("--seed-profile", default="initial",
                   choices=("initial", "uniform", "bump"))
    p.add_argument("--epsilon-schedule", default=None,
                   help="comma-separated decreasing mollification widths")
    p = sub.add_parser("simulate-sde", help="jump-diffusion path ensemble")
    with_config(p)
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=None,
                   help="stream seed (default: output.seed)")
    p = sub.add_parser("metric-d0", help="flat distance between two measures")
    p.add_argument("--a", required=True, help="field binary or CSV point list")
    p.add_argument("--b", required=True, help="field binary or CSV point list")
    p.add_argument("--method", default="exact-lp",
                   choices=("exact-lp", "grid-lp", "bounds"))
    with_config(sub.add_parser(
        "kernel-probe", help="heat-kernel decay table for the config's spec"))
    with_config(sub.add_parser(
        "check-all", help="full release battery"), out_required=False)
    return parser


def _prepare_outdir(cfg: RunConfig, arg) -> pathlib.Path:
    outdir = pathlib.Path(arg if arg else cfg.output.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "metric-d0":
            cmd_metric_d0(args.a, args.b, args.method)
            return 0
        cfg = load_config(args.config)
        outdir = _prepare_outdir(cfg, args.out)
        if args.command == "solve-hjb":
            report = cmd_solve_hjb(cfg, outdir)
        elif args.command == "solve-fp":
            report = cmd_solve_fp(cfg, outdir)
        elif args.command == "solve-mfg":
            schedule = None
            if args.epsilon_schedule:
                schedule = tuple(float(tok) for tok in
                                 args.epsilon_schedule.split(","))
            report = cmd_solve_mfg(cfg, outdir, args.seed_profile, schedule)
        elif args.command == "simulate-sde":
            seed = cfg.output.seed if args.seed is None else args.seed
            report = cmd_simulate_sde(cfg, outdir, args.paths, seed)
        elif args.command == "kernel-probe":
            report = cmd_kernel_probe(cfg, outdir)
        else:
            report = cmd_check_all(cfg, outdir)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.command != "check-all":
        _print_checks(report)
    print(f"report: {pathlib.Path(args.out or cfg.output.directory) / 'report.json'}")
    return _exit_code(report)


if __name__ == "__main__":
    sys.exit(main())
