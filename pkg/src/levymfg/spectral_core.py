"""Periodic grids, fields, and spectral primitives.

Everything in this package lives on a regular grid over the flat torus
[-L_1, L_1) x ... x [-L_d, L_d) with a power-of-two number of points per
axis. Fourier multipliers use the angular frequencies xi_k = pi k / L_i
(the natural dual lattice of the torus), so a mode cos(x) on [-pi, pi) sits
exactly on the xi = 1 bin. Fields are immutable containers around float64
arrays; solvers work on raw arrays internally and wrap results at the end.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import struct
from typing import Iterable, Sequence

import numpy as np
import scipy.fft

# Hard cap on grid cells; protects against accidental 2^15 x 2^15 requests.
MAX_TOTAL_POINTS = 2**27

_MAGIC = b"LMFG"
_FORMAT_VERSION = 1


def worker_count() -> int:
    """Thread budget for FFT work, from LMFG_THREADS (default: all cores)."""
    raw = os.environ.get("LMFG_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"LMFG_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"LMFG_THREADS must be >= 1, got {n}")
    return n


def _as_tuple(value, dim: int, kind) -> tuple:
    if np.isscalar(value):
        return tuple(kind(value) for _ in range(dim))
    out = tuple(kind(v) for v in value)
    if len(out) != dim:
        raise ValueError(f"expected {dim} entries, got {len(out)}")
    return out


@dataclasses.dataclass(frozen=True)
class Grid:
    """Regular periodic grid on [-L, L)^d.

    Attributes
    ----------
    half_extent : per-axis L_i > 0.
    points : per-axis N_i, each a power of two >= 2.
    """

    half_extent: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "half_extent", tuple(float(L) for L in self.half_extent))
        object.__setattr__(self, "points", tuple(int(N) for N in self.points))
        if len(self.half_extent) != len(self.points) or not self.points:
            raise ValueError("half_extent and points must be equal-length, nonempty")
        for L in self.half_extent:
            if not (L > 0 and math.isfinite(L)):
                raise ValueError(f"half extent must be positive and finite, got {L}")
        for N in self.points:
            if N < 2 or N & (N - 1):
                raise ValueError(f"points per axis must be a power of two >= 2, got {N}")
        total = math.prod(self.points)
        if total > MAX_TOTAL_POINTS:
            raise ValueError(f"grid has {total} cells, cap is {MAX_TOTAL_POINTS}")

    @classmethod
    def regular(cls, half_extent, points, dim: int | None = None) -> "Grid":
        """Build a grid from scalars or sequences; scalars replicate over dim."""
        if dim is None:
            if np.isscalar(half_extent) and np.isscalar(points):
                dim = 1
            else:
                dim = len(half_extent) if not np.isscalar(half_extent) else len(points)
        return cls(_as_tuple(half_extent, dim, float), _as_tuple(points, dim, int))

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(2 * L / N for L, N in zip(self.half_extent, self.points))

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def box_volume(self) -> float:
        return math.prod(2 * L for L in self.half_extent)

    def axis_coordinates(self, axis: int) -> np.ndarray:
        L, N = self.half_extent[axis], self.points[axis]
        return -L + (2 * L / N) * np.arange(N)

    def coordinate_mesh(self) -> tuple[np.ndarray, ...]:
        axes = [self.axis_coordinates(i) for i in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def axis_frequencies(self, axis: int) -> np.ndarray:
        # 2*pi*fftfreq(N, h) == pi * k / L for k = 0..N/2-1, -N/2..-1.
        h = self.spacing[axis]
        return 2 * np.pi * np.fft.fftfreq(self.points[axis], d=h)

    def frequency_mesh(self) -> tuple[np.ndarray, ...]:
        """Per-axis frequencies shaped for broadcasting against field arrays."""
        out = []
        for i in range(self.dim):
            shape = [1] * self.dim
            shape[i] = self.points[i]
            out.append(self.axis_frequencies(i).reshape(shape))
        return tuple(out)

    def frequency_magnitude(self) -> np.ndarray:
        xi = self.frequency_mesh()
        out = np.zeros(self.shape)
        for x in xi:
            out = out + x**2
        return np.sqrt(out)

    def radius_mesh(self) -> np.ndarray:
        """Distance to the origin, full shape (the box is centered at 0)."""
        mesh = self.coordinate_mesh()
        out = np.zeros(self.shape)
        for x in mesh:
            out = out + x**2
        return np.sqrt(out)

    def torus_displacement(self, dx: np.ndarray, axis: int) -> np.ndarray:
        """Signed displacement wrapped to [-L, L)."""
        period = 2 * self.half_extent[axis]
        return (np.asarray(dx) + self.half_extent[axis]) % period - self.half_extent[axis]


@dataclasses.dataclass(frozen=True)
class Field:
    """Immutable real scalar field sampled on a Grid.

    values is copied to float64 and marked read-only; time_tag is an
    optional solver timestamp carried through I/O.
    """

    grid: Grid
    values: np.ndarray
    time_tag: float | None = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.shape != self.grid.shape:
            raise ValueError(f"values shape {arr.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.time_tag is not None:
            object.__setattr__(self, "time_tag", float(self.time_tag))

    def with_values(self, values: np.ndarray, time_tag: float | None = None) -> "Field":
        return Field(self.grid, values, self.time_tag if time_tag is None else time_tag)

    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.cell_volume)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def lp_norm(self, p: float) -> float:
        return lp_norm(self.values, p, self.grid.cell_volume)


@dataclasses.dataclass(frozen=True)
class ProbabilityField(Field):
    """Field constrained to be a probability density on the torus.

    mass_tol bounds |integral - 1|; negative_tol bounds how far below zero
    values may dip (solvers produce small negative ripples and pass a run
    tolerance here; exact data uses the strict defaults).
    """

    mass_tol: float = 1e-8
    negative_tol: float = 1e-10

    def __post_init__(self):
        super().__post_init__()
        low = float(np.min(self.values))
        if low < -self.negative_tol:
            raise ValueError(f"density dips to {low}, below -{self.negative_tol}")
        m = self.mass()
        if abs(m - 1.0) > self.mass_tol:
            raise ValueError(f"density mass {m} deviates from 1 beyond {self.mass_tol}")

    @classmethod
    def normalized(cls, grid: Grid, values: np.ndarray, time_tag: float | None = None,
                   clip: bool = False, **tols) -> "ProbabilityField":
        """Rescale values to unit mass (optionally clipping negatives first)."""
        arr = np.asarray(values, dtype=np.float64)
        if clip:
            arr = np.maximum(arr, 0.0)
        total = np.sum(arr) * grid.cell_volume
        if not total > 0:
            raise ValueError("cannot normalize a field with nonpositive mass")
        return cls(grid, arr / total, time_tag, **tols)


def lp_norm(values: np.ndarray, p: float, cell_volume: float) -> float:
    if p == np.inf:
        return float(np.max(np.abs(values)))
    if p <= 0:
        raise ValueError(f"p must be positive or inf, got {p}")
    return float((np.sum(np.abs(values) ** p) * cell_volume) ** (1.0 / p))


# -- transforms ---------------------------------------------------------------

def fftn(values: np.ndarray) -> np.ndarray:
    return scipy.fft.fftn(values, workers=worker_count())


def ifftn(values: np.ndarray) -> np.ndarray:
    return scipy.fft.ifftn(values, workers=worker_count())


def to_spectrum(field: Field) -> np.ndarray:
    """Forward FFT of the field values (unnormalized numpy convention)."""
    return fftn(field.values)


def real_part(values: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Drop the imaginary residue of a nominally real inverse transform."""
    scale = max(1.0, float(np.max(np.abs(values.real))))
    worst = float(np.max(np.abs(values.imag)))
    if worst > tol * scale:
        raise ValueError(f"imaginary residue {worst} exceeds {tol} * scale")
    return np.ascontiguousarray(values.real)


def from_spectrum(grid: Grid, spectrum: np.ndarray, time_tag: float | None = None) -> Field:
    return Field(grid, real_part(ifftn(spectrum)), time_tag)


def derivative_multiplier(grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """(i xi)^order on one axis, broadcast-shaped; odd orders zero Nyquist.

    The Nyquist bin carries cos(pi N x / ...) content whose odd derivative
    has no faithful grid representative; zeroing it keeps odd-order
    derivatives of real fields real and antisymmetric.
    """
    xi = grid.frequency_mesh()[axis].copy()
    if order % 2 == 1:
        nyq = grid.points[axis] // 2
        np.put_along_axis(xi, np.full([1] * grid.dim, nyq, dtype=np.intp), 0.0, axis=axis)
    return (1j * xi) ** order


def spectral_derivative(field: Field, axis: int, order: int = 1) -> Field:
    mult = derivative_multiplier(field.grid, axis, order)
    return from_spectrum(field.grid, mult * to_spectrum(field), field.time_tag)


def spectral_gradient(field: Field) -> tuple[Field, ...]:
    spec = to_spectrum(field)
    out = []
    for axis in range(field.grid.dim):
        mult = derivative_multiplier(field.grid, axis, 1)
        out.append(from_spectrum(field.grid, mult * spec, field.time_tag))
    return tuple(out)


def gradient_arrays(grid: Grid, values: np.ndarray) -> tuple[np.ndarray, ...]:
    """Raw-array gradient used inside solver loops."""
    spec = fftn(values)
    return tuple(
        real_part(ifftn(derivative_multiplier(grid, axis, 1) * spec))
        for axis in range(grid.dim)
    )


def hessian_frobenius(field: Field) -> Field:
    """Pointwise Frobenius norm of the spectral Hessian."""
    spec = to_spectrum(field)
    grid = field.grid
    acc = np.zeros(grid.shape)
    for i in range(grid.dim):
        mi = derivative_multiplier(grid, i, 1)
        for j in range(grid.dim):
            if i == j:
                entry = real_part(ifftn(derivative_multiplier(grid, i, 2) * spec))
            else:
                mj = derivative_multiplier(grid, j, 1)
                entry = real_part(ifftn(mi * mj * spec))
            acc += entry**2
    return Field(grid, np.sqrt(acc), field.time_tag)


def convolve(a: Field, b: Field) -> Field:
    """Periodic convolution (f * g)(x) = integral f(y) g(x - y) dy."""
    if a.grid != b.grid:
        raise ValueError("convolution requires a shared grid")
    spec = to_spectrum(a) * to_spectrum(b) * a.grid.cell_volume
    return from_spectrum(a.grid, spec)


def inner_product(a: Field, b: Field) -> float:
    if a.grid != b.grid:
        raise ValueError("inner product requires a shared grid")
    return float(np.sum(a.values * b.values) * a.grid.cell_volume)


# -- binary and CSV formats ---------------------------------------------------
#
# Binary layout (little endian):
#   magic "LMFG" | version u32 | dim u32 | N_1..N_d u32 | L_1..L_d f64
#   | time_tag f64 (NaN encodes "untagged") | payload f64, C order.
# A complex payload is stored interleaved re,im; readers recognize it by the
# payload being exactly twice the grid size.

def write_array_binary(path, grid: Grid, values: np.ndarray,
                       time_tag: float | None = None) -> None:
    arr = np.asarray(values)
    if arr.shape != grid.shape:
        raise ValueError(f"array shape {arr.shape} != grid shape {grid.shape}")
    if np.iscomplexobj(arr):
        payload = np.empty(arr.shape + (2,), dtype="<f8")
        payload[..., 0] = arr.real
        payload[..., 1] = arr.imag
    else:
        payload = np.ascontiguousarray(arr, dtype="<f8")
    tag = math.nan if time_tag is None else float(time_tag)
    header = struct.pack("<4sII", _MAGIC, _FORMAT_VERSION, grid.dim)
    header += struct.pack(f"<{grid.dim}I", *grid.points)
    header += struct.pack(f"<{grid.dim}d", *grid.half_extent)
    header += struct.pack("<d", tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))


def read_array_binary(path) -> tuple[Grid, np.ndarray, float | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.unpack_from("<4sII", blob, 0)
    if head[0] != _MAGIC:
        raise ValueError(f"bad magic {head[0]!r}, expected {_MAGIC!r}")
    if head[1] != _FORMAT_VERSION:
        raise ValueError(f"unsupported format version {head[1]}")
    dim = head[2]
    off = struct.calcsize("<4sII")
    points = struct.unpack_from(f"<{dim}I", blob, off)
    off += struct.calcsize(f"<{dim}I")
    half = struct.unpack_from(f"<{dim}d", blob, off)
    off += struct.calcsize(f"<{dim}d")
    (tag,) = struct.unpack_from("<d", blob, off)
    off += struct.calcsize("<d")
    grid = Grid(half, points)
    total = math.prod(points)
    flat = np.frombuffer(blob, dtype="<f8", offset=off)
    if flat.size == total:
        values = flat.reshape(grid.shape).copy()
    elif flat.size == 2 * total:
        pairs = flat.reshape(grid.shape + (2,))
        values = (pairs[..., 0] + 1j * pairs[..., 1]).copy()
    else:
        raise ValueError(f"payload holds {flat.size} floats, expected {total} or {2 * total}")
    return grid, values, (None if math.isnan(tag) else tag)


def write_field_binary(path, field: Field) -> None:
    write_array_binary(path, field.grid, field.values, field.time_tag)


def read_field_binary(path) -> Field:
    grid, values, tag = read_array_binary(path)
    if np.iscomplexobj(values):
        raise ValueError("file holds a complex payload, not a real field")
    return Field(grid, values, tag)


def write_field_csv(path, field: Field) -> None:
    """Point list export: header x1,..,xd,value; rows in C order."""
    grid = field.grid
    mesh = grid.coordinate_mesh()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(grid.dim)] + ["value"])
        cols = [m.ravel() for m in mesh] + [field.values.ravel()]
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])
