"""Bounded-Lipschitz distance d0 between discrete probability measures.

d0(mu, nu) maximizes integral f d(mu - nu) over test functions with
sup norm at most 1 and Lipschitz constant at most 1. On discrete supports
this is a small LP; three evaluation routes are provided with different
cost/exactness trade-offs, plus an enumeration oracle for tiny instances
that certifies the LP code path.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Sequence

import numpy as np

from .spectral_core import Field, Grid


@dataclasses.dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure on finitely many support points.

    torus_extent, when set, makes distances wrap (flat torus); lattice_shape
    and lattice_spacing record the grid structure needed by the neighbor-LP
    route. pooling_error carries the transport bound of any coarsening that
    produced this measure.
    """

    points: np.ndarray
    weights: np.ndarray
    torus_extent: tuple[float, ...] | None = None
    lattice_shape: tuple[int, ...] | None = None
    lattice_spacing: tuple[float, ...] | None = None
    pooling_error: float = 0.0

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise ValueError("support points must form an (n, d) array")
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape[0] != pts.shape[0]:
            raise ValueError("one weight per support point required")
        if w.min() < -1e-12:
            raise ValueError(f"negative weight {w.min()}")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights sum to {w.sum()}, not 1")
        w = np.where(w < 0, 0.0, w)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_points(cls, points, weights, torus_extent=None) -> "DiscreteMeasure":
        return cls(points, weights, torus_extent)

    @classmethod
    def from_field(cls, field: Field, max_cells: int = 2000) -> "DiscreteMeasure":
        """Grid density as an atomic measure, block-pooled to <= max_cells.

        Pooling moves mass to block centers; the induced d0 perturbation is
        at most half the block node spread and is recorded in pooling_error.
        """
        grid = field.grid
        vals = np.where(field.values > 0, field.values, 0.0)
        mass = vals.sum() * grid.cell_volume
        if mass <= 0:
            raise ValueError("field carries no positive mass")
        factors = [1] * grid.dim
        shape = list(grid.points)
        while math.prod(shape) > max_cells:
            axis = int(np.argmax(shape))
            if shape[axis] == 1:
                raise ValueError("cannot pool below one cell per axis")
            shape[axis] //= 2
            factors[axis] *= 2
        weights = vals * (grid.cell_volume / mass)
        for axis, k in enumerate(factors):
            if k > 1:
                new = weights.reshape(
                    weights.shape[:axis]
                    + (shape[axis], k)
                    + weights.shape[axis + 1 :]
                )
                weights = new.sum(axis=axis + 1)
        axes = []
        for axis, (n, k) in enumerate(zip(shape, factors)):
            h = grid.spacing[axis]
            axes.append(-grid.half_extent[axis] + (np.arange(n) * k + (k - 1) / 2) * h)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        spread = math.sqrt(
            sum(((k - 1) * h) ** 2 for k, h in zip(factors, grid.spacing))
        )
        return cls(
            pts,
            weights.ravel(),
            torus_extent=grid.half_extent,
            lattice_shape=tuple(shape),
            lattice_spacing=tuple(
                k * h for k, h in zip(factors, grid.spacing)
            ),
            pooling_error=spread / 2,
        )


def _same_space(a: DiscreteMeasure, b: DiscreteMeasure):
    if a.points.shape != b.points.shape or not np.allclose(
        a.points, b.points, atol=1e-12
    ):
        raise ValueError("measures live on different support point sets")
    if a.torus_extent != b.torus_extent:
        raise ValueError("measures disagree on the torus wrap")


def _pairwise_distance(points: np.ndarray, torus_extent) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    if torus_extent is not None:
        for axis, ext in enumerate(torus_extent):
            span = 2 * ext
            diff[..., axis] = (diff[..., axis] + ext) % span - ext
    return np.sqrt((diff**2).sum(axis=-1))


@dataclasses.dataclass(frozen=True)
class D0Result:
    value: float
    lower: float
    upper: float
    method: str
    label: str
    certificate: np.ndarray | None = None
    uncertainty: float = 0.0


# -- bounded-Lipschitz LP by active-set pivoting --------------------------------

class _ActiveSetLP:
    """maximize c.f over |f_i| <= 1, f_i - f_j <= rho_ij for listed pairs.

    Constraint ids: 0..n-1 lower boxes (-f_i <= 1), n..2n-1 upper boxes
    (f_i <= 1), 2n+k the k-th pair. Starts at the vertex f = -1 (all lower
    boxes active). Bland's smallest-id rule on both the leaving and entering
    choice prevents cycling; the basis inverse is carried by rank-one row
    replacement and refreshed periodically against drift.
    """

    def __init__(self, c, pair_i, pair_j, pair_rho):
        self.c = np.asarray(c, dtype=float)
        self.n = self.c.shape[0]
        self.pi = np.asarray(pair_i, dtype=np.intp)
        self.pj = np.asarray(pair_j, dtype=np.intp)
        self.rho = np.asarray(pair_rho, dtype=float)
        if np.any(self.rho < 0):
            raise ValueError("negative pair distance")

    def _row(self, cid):
        row = np.zeros(self.n)
        if cid < self.n:
            row[cid] = -1.0
        elif cid < 2 * self.n:
            row[cid - self.n] = 1.0
        else:
            k = cid - 2 * self.n
            row[self.pi[k]] += 1.0
            row[self.pj[k]] -= 1.0
        return row

    def _rhs(self, cid):
        return 1.0 if cid < 2 * self.n else float(self.rho[cid - 2 * self.n])

    def _rebuild(self, active):
        B = np.stack([self._row(cid) for cid in active])
        return B, np.linalg.inv(B)

    def _vertex(self, active):
        B, Binv = self._rebuild(active)
        b = np.array([self._rhs(cid) for cid in active])
        return np.linalg.solve(B, b), Binv

    def solve(self, tol=1e-10, max_iter=None):
        n = self.n
        f = -np.ones(n)
        active = np.arange(n, dtype=np.intp)  # lower boxes
        _, Binv = self._rebuild(active)
        max_iter = max_iter or (50 * n + 2000)
        for it in range(max_iter):
            lam = Binv.T @ self.c
            bad = np.flatnonzero(lam < -tol)
            if bad.size == 0:
                return float(self.c @ f), f
            pos = bad[np.argmin(active[bad])]
            d = -Binv[:, pos]
            # ratio test over inactive constraints
            best_alpha = np.inf
            best_id = -1
            lo_gain = -d
            up_gain = d
            slack_lo = 1.0 + f
            slack_up = 1.0 - f
            for gain, slack, base in (
                (lo_gain, slack_lo, 0),
                (up_gain, slack_up, n),
            ):
                ok = gain > tol
                if np.any(ok):
                    alphas = np.where(ok, slack / np.where(ok, gain, 1.0), np.inf)
                    k = int(np.argmin(alphas))
                    a = alphas[k]
                    ids = np.flatnonzero(alphas <= a * (1 + 1e-12) + 1e-15)
                    k = int(ids.min())
                    if alphas[k] < best_alpha * (1 - 1e-12) or (
                        abs(alphas[k] - best_alpha) <= 1e-12 * max(1.0, best_alpha)
                        and base + k < best_id
                    ):
                        best_alpha, best_id = float(alphas[k]), base + k
            if self.rho.size:
                gain = d[self.pi] - d[self.pj]
                slack = self.rho - (f[self.pi] - f[self.pj])
                ok = gain > tol
                if np.any(ok):
                    alphas = np.where(ok, slack / np.where(ok, gain, 1.0), np.inf)
                    k = int(np.argmin(alphas))
                    a = alphas[k]
                    ids = np.flatnonzero(alphas <= a * (1 + 1e-12) + 1e-15)
                    k = int(ids.min())
                    if alphas[k] < best_alpha * (1 - 1e-12) or (
                        abs(alphas[k] - best_alpha) <= 1e-12 * max(1.0, best_alpha)
                        and 2 * n + k < best_id
                    ):
                        best_alpha, best_id = float(alphas[k]), 2 * n + k
            if best_id < 0:
                raise RuntimeError("unbounded direction in a box-bounded LP")
            best_alpha = max(best_alpha, 0.0)
            f = f + best_alpha * d
            old = self._row(active[pos])
            new = self._row(best_id)
            active[pos] = best_id
            u = Binv[:, pos]
            vt = (new - old) @ Binv
            denom = 1.0 + vt[pos]
            if abs(denom) < 1e-12 or (it + 1) % 64 == 0:
                f, Binv = self._vertex(active)
            else:
                Binv = Binv - np.outer(u, vt) / denom
        raise RuntimeError("active-set LP failed to converge")


def _exact_lp(points, c, torus_extent):
    keep = np.flatnonzero(np.abs(c) > 1e-15)
    if keep.size == 0:
        return 0.0, np.zeros(c.shape[0])
    # points with zero difference never help: the metric triangle inequality
    # makes their pair constraints redundant
    sub_pts = points[keep]
    sub_c = c[keep]
    rho = _pairwise_distance(sub_pts, torus_extent)
    n = keep.size
    ii, jj = np.nonzero((rho < 2.0) & ~np.eye(n, dtype=bool))
    value, f_sub = _ActiveSetLP(sub_c, ii, jj, rho[ii, jj]).solve()
    f = np.zeros(c.shape[0])
    f[keep] = f_sub
    return value, f


def _grid_lp(measure: DiscreteMeasure, c):
    shape = measure.lattice_shape
    if shape is None:
        raise ValueError("grid-lp requires measures built from a grid field")
    spacing = measure.lattice_spacing
    idx = np.arange(math.prod(shape)).reshape(shape)
    pair_i, pair_j, pair_rho = [], [], []
    for axis, n_ax in enumerate(shape):
        if n_ax < 2:
            continue
        neighbor = np.roll(idx, -1, axis=axis)
        a = idx.ravel()
        b = neighbor.ravel()
        if n_ax == 2:
            keep = a < b  # wrap would duplicate the single neighbor pair
            a, b = a[keep], b[keep]
        for x, y in ((a, b), (b, a)):
            pair_i.append(x)
            pair_j.append(y)
            pair_rho.append(np.full(x.shape[0], spacing[axis]))
    if not pair_i:
        pair_i = pair_j = pair_rho = [np.empty(0)]
    value, f = _ActiveSetLP(
        c,
        np.concatenate(pair_i),
        np.concatenate(pair_j),
        np.concatenate(pair_rho),
    ).solve()
    return value, f


def _bounds(a: DiscreteMeasure, b: DiscreteMeasure, c):
    # lower: best pairing over a cheap feasible family. Axis ramps see
    # translation; radial ramps around the joint barycenter see spreading.
    # On a torus those are not admissible across the seam, so periodic
    # waves (Lipschitz with respect to the wrap metric) stand in for them.
    pts = a.points
    center = (a.weights + b.weights) @ pts / 2.0
    candidates = []
    if a.torus_extent is None:
        for ax in range(pts.shape[1]):
            candidates.append(np.clip(pts[:, ax] - center[ax], -1.0, 1.0))
        radii = np.linalg.norm(pts - center, axis=1)
        mean_r = (a.weights + b.weights) @ radii / 2.0
        for r0 in (0.0, mean_r, 2 * mean_r):
            candidates.append(np.clip(radii - r0, -1.0, 1.0))
    else:
        for ax, ext in enumerate(a.torus_extent):
            for mult in (1, 2):
                k = mult * np.pi / ext
                amp = min(1.0, 1.0 / k)
                phase = k * (pts[:, ax] - center[ax])
                candidates.append(amp * np.sin(phase))
                candidates.append(amp * np.cos(phase))
    lower = max(abs(float(c @ f)) for f in candidates)
    tv = float(np.abs(c).sum())
    rho = np.minimum(_pairwise_distance(pts, a.torus_extent), 2.0)
    coupling = float(a.weights @ rho @ b.weights)
    return lower, min(tv, coupling)


def d0_distance(
    a: DiscreteMeasure, b: DiscreteMeasure, method: str = "exact-lp"
) -> D0Result:
    """Bounded-Lipschitz distance between measures on a shared support.

    exact-lp maximizes over the full Euclidean (or torus) Lipschitz class
    and is exact. grid-lp constrains only lattice-neighbor increments, which
    measures distance in the l1 grid metric: its value sits in
    [d0, sqrt(d) d0] and is labeled d0_l1. bounds returns cheap two-sided
    estimates without solving anything.
    """
    _same_space(a, b)
    c = a.weights - b.weights
    uncertainty = a.pooling_error + b.pooling_error
    if method == "exact-lp":
        if a.points.shape[0] > 2000:
            raise ValueError("exact-lp supports at most 2000 points; pool first")
        value, f = _exact_lp(a.points, c, a.torus_extent)
        return D0Result(value, value, value, method, "d0", f, uncertainty)
    if method == "grid-lp":
        value, f = _grid_lp(a, c)
        root_d = math.sqrt(a.dim)
        return D0Result(
            value, value / root_d, value, method, "d0_l1", f, uncertainty
        )
    if method == "bounds":
        lower, upper = _bounds(a, b, c)
        return D0Result(upper, lower, upper, method, "d0_bounds", None, uncertainty)
    raise ValueError(f"unknown method {method!r}")


# -- enumeration oracle ----------------------------------------------------------

def _forests(n: int):
    """All acyclic edge subsets of the complete graph on n nodes."""
    edges = list(itertools.combinations(range(n), 2))
    for mask in range(2 ** len(edges)):
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        chosen = []
        acyclic = True
        for k, (i, j) in enumerate(edges):
            if mask >> k & 1:
                ri, rj = find(i), find(j)
                if ri == rj:
                    acyclic = False
                    break
                parent[ri] = rj
                chosen.append((i, j))
        if acyclic:
            yield chosen


def d0_brute_oracle(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """Exact d0 on tiny supports by enumerating LP vertices directly.

    Any optimal vertex activates a forest of pair equalities
    f_i - f_j = +-rho_ij plus one box anchor f = +-1 per tree. Enumerating
    every forest, edge-sign pattern, and anchor choice therefore covers all
    vertices; infeasible candidates are filtered and the best objective over
    the survivors is the optimum. Independent of the pivoting solver.
    """
    _same_space(a, b)
    n = a.points.shape[0]
    if n > 6:
        raise ValueError("enumeration oracle is limited to 6 support points")
    c = a.weights - b.weights
    rho = _pairwise_distance(a.points, a.torus_extent)
    candidates = []
    for forest in _forests(n):
        comps = {i: {i} for i in range(n)}
        owner = list(range(n))
        offsets_base = np.zeros(n)
        adj = {i: [] for i in range(n)}
        for i, j in forest:
            adj[i].append(j)
            adj[j].append(i)
        for signs in itertools.product((1.0, -1.0), repeat=len(forest)):
            # signed offsets within each tree by propagation from its root
            offset = offsets_base.copy()
            seen = [False] * n
            comp_nodes = []
            for start in range(n):
                if seen[start]:
                    continue
                stack = [start]
                seen[start] = True
                nodes = [start]
                while stack:
                    u = stack.pop()
                    for v in adj[u]:
                        if not seen[v]:
                            seen[v] = True
                            k = forest.index((min(u, v), max(u, v)))
                            step = signs[k] * rho[min(u, v), max(u, v)]
                            offset[v] = offset[u] + (step if u < v else -step)
                            stack.append(v)
                            nodes.append(v)
                comp_nodes.append(nodes)
            anchor_options = []
            for nodes in comp_nodes:
                opts = []
                for r in nodes:
                    for s in (1.0, -1.0):
                        opts.append((nodes, s - offset[r]))
                anchor_options.append(opts)
            for combo in itertools.product(*anchor_options):
                f = offset.copy()
                for nodes, shift in combo:
                    for u in nodes:
                        f[u] += shift
                candidates.append(f)
    cand = np.asarray(candidates)
    ok = np.all(np.abs(cand) <= 1.0 + 1e-9, axis=1)
    diff = cand[:, :, None] - cand[:, None, :]
    ok &= np.all(np.abs(diff) <= rho[None, :, :] + 1e-9, axis=(1, 2))
    feasible = cand[ok]
    if feasible.shape[0] == 0:
        raise RuntimeError("vertex enumeration produced no feasible candidate")
    return float(np.max(feasible @ c))


# -- trajectories -----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TrajectoryGap:
    sup: float
    argmax_time: float
    values: tuple[float, ...]


def d0_trajectory_sup(
    times_a: Sequence[float],
    measures_a: Sequence[DiscreteMeasure],
    times_b: Sequence[float],
    measures_b: Sequence[DiscreteMeasure],
    method: str = "exact-lp",
) -> TrajectoryGap:
    """sup over shared time nodes of d0 between two measure flows."""
    ta = np.asarray(times_a, dtype=float)
    tb = np.asarray(times_b, dtype=float)
    if ta.shape != tb.shape or not np.allclose(ta, tb, atol=1e-12):
        raise ValueError("trajectories use different time grids")
    if len(measures_a) != ta.size or len(measures_b) != ta.size:
        raise ValueError("one measure per time node required")
    values = [
        d0_distance(ma, mb, method=method).value
        for ma, mb in zip(measures_a, measures_b)
    ]
    k = int(np.argmax(values))
    return TrajectoryGap(float(values[k]), float(ta[k]), tuple(values))
