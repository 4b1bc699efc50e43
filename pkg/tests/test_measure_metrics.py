import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from levymfg.measure_metrics import (
    DiscreteMeasure,
    _pairwise_distance,
    d0_brute_oracle,
    d0_distance,
    d0_trajectory_sup,
)
from levymfg.spectral_core import Field, Grid


def random_pair(rng, n, d, shared_points=None):
    pts = shared_points if shared_points is not None else rng.uniform(-3, 3, (n, d))
    return (
        DiscreteMeasure(pts, rng.dirichlet(np.ones(n))),
        DiscreteMeasure(pts, rng.dirichlet(np.ones(n))),
    )


def linprog_reference(points, c, torus_extent=None):
    """Same LP through an unrelated solver (HiGHS)."""
    n = len(c)
    rho = _pairwise_distance(points, torus_extent)
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    rows = np.zeros((ii.size, n))
    rows[np.arange(ii.size), ii] = 1.0
    rows[np.arange(ii.size), jj] = -1.0
    res = linprog(-c, A_ub=rows, b_ub=rho[ii, jj], bounds=(-1, 1), method="highs")
    assert res.success
    return -res.fun


class TestTwoAtoms:
    def test_closed_form_short_and_capped(self):
        # delta_0 vs delta_a costs min(|a|, 2): the Lipschitz budget pays
        # |a| until the sup-norm box clips the test function at +-1
        for a, want in ((0.25, 0.25), (0.5, 0.5), (1.7, 1.7), (2.0, 2.0), (5.0, 2.0)):
            pts = np.array([[0.0], [a]])
            mu = DiscreteMeasure(pts, np.array([1.0, 0.0]))
            nu = DiscreteMeasure(pts, np.array([0.0, 1.0]))
            res = d0_distance(mu, nu)
            assert res.value == pytest.approx(want, abs=1e-12)
            assert d0_brute_oracle(mu, nu) == pytest.approx(want, abs=1e-12)

    def test_identical_measures_give_zero(self):
        pts = np.array([[0.0, 0.0], [1.0, 2.0], [-1.5, 0.5]])
        w = np.array([0.2, 0.5, 0.3])
        mu = DiscreteMeasure(pts, w)
        assert d0_distance(mu, mu).value == 0.0


class TestAgainstOracles:
    def test_enumeration_oracle_on_random_instances(self):
        rng = np.random.default_rng(42)
        for trial in range(25):
            n = int(rng.integers(2, 7))
            d = int(rng.integers(1, 3))
            mu, nu = random_pair(rng, n, d)
            mine = d0_distance(mu, nu).value
            ref = d0_brute_oracle(mu, nu)
            assert mine == pytest.approx(ref, abs=1e-3)
            assert mine == pytest.approx(ref, abs=1e-9)

    def test_external_solver_cross_check(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            n = int(rng.integers(5, 41))
            d = int(rng.integers(1, 4))
            mu, nu = random_pair(rng, n, d)
            mine = d0_distance(mu, nu).value
            ref = linprog_reference(mu.points, mu.weights - nu.weights)
            assert mine == pytest.approx(ref, abs=1e-7)

    def test_weak_duality_against_feasible_test_functions(self):
        # f(x) = a sin(k.x + phi) with |a| <= 1 and |a||k| <= 1 lies in the
        # admissible class, so its pairing can never beat the LP value
        rng = np.random.default_rng(11)
        mu, nu = random_pair(rng, 30, 2)
        value = d0_distance(mu, nu).value
        c = mu.weights - nu.weights
        for trial in range(10):
            a = rng.uniform(-1, 1)
            k = rng.uniform(-1, 1, size=2)
            k /= max(1.0, abs(a) * np.linalg.norm(k))
            f = a * np.sin(mu.points @ k + rng.uniform(0, 2 * np.pi))
            assert f @ c <= value + 1e-9


class TestMetricAxioms:
    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_symmetry_triangle_and_range(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        d = int(rng.integers(1, 3))
        pts = rng.uniform(-3, 3, (n, d))
        mu, nu = random_pair(rng, n, d, shared_points=pts)
        (eta,) = (DiscreteMeasure(pts, rng.dirichlet(np.ones(n))),)
        d_mn = d0_distance(mu, nu).value
        d_nm = d0_distance(nu, mu).value
        d_me = d0_distance(mu, eta).value
        d_en = d0_distance(eta, nu).value
        assert abs(d_mn - d_nm) <= 1e-10
        assert d_mn <= d_me + d_en + 1e-8
        assert -1e-12 <= d_mn <= 2.0 + 1e-12

    def test_distance_never_exceeds_two(self):
        pts = np.array([[0.0], [1000.0]])
        mu = DiscreteMeasure(pts, np.array([1.0, 0.0]))
        nu = DiscreteMeasure(pts, np.array([0.0, 1.0]))
        assert d0_distance(mu, nu).value == pytest.approx(2.0, abs=1e-12)


class TestCertificates:
    def test_certificate_is_feasible_and_attains_value(self):
        rng = np.random.default_rng(8)
        mu, nu = random_pair(rng, 25, 2)
        res = d0_distance(mu, nu)
        f = res.certificate
        assert np.all(np.abs(f) <= 1 + 1e-9)
        rho = _pairwise_distance(mu.points, None)
        gaps = np.abs(f[:, None] - f[None, :]) - rho
        assert gaps.max() <= 1e-9
        assert f @ (mu.weights - nu.weights) == pytest.approx(res.value, abs=1e-10)


class TestGridRoute:
    @staticmethod
    def field_pair_2d():
        g = Grid.regular(4.0, (16, 16))
        X, Y = g.coordinate_mesh()
        v1 = np.exp(-(X**2 + Y**2))
        v2 = np.exp(-((X - 1) ** 2 + (Y + 0.5) ** 2) / 1.5)
        a = DiscreteMeasure.from_field(Field(g, v1 / (v1.sum() * g.cell_volume)))
        b = DiscreteMeasure.from_field(Field(g, v2 / (v2.sum() * g.cell_volume)))
        return a, b

    def test_neighbor_lp_sandwiches_the_euclidean_value(self):
        a, b = self.field_pair_2d()
        exact = d0_distance(a, b, method="exact-lp")
        lattice = d0_distance(a, b, method="grid-lp")
        assert lattice.label == "d0_l1"
        assert exact.value - 1e-9 <= lattice.value
        assert lattice.value <= np.sqrt(2) * exact.value + 1e-9
        assert lattice.lower - 1e-9 <= exact.value <= lattice.upper + 1e-9

    def test_neighbor_lp_is_exact_in_one_dimension(self):
        g = Grid.regular(np.pi, 64)
        x = g.axis_coordinates(0)
        v1 = np.exp(np.cos(x))
        v2 = np.exp(np.cos(2 * x - 0.7))
        a = DiscreteMeasure.from_field(Field(g, v1 / (v1.sum() * g.cell_volume)))
        b = DiscreteMeasure.from_field(Field(g, v2 / (v2.sum() * g.cell_volume)))
        exact = d0_distance(a, b, method="exact-lp").value
        lattice = d0_distance(a, b, method="grid-lp").value
        assert lattice == pytest.approx(exact, abs=1e-10)

    def test_bounds_route_brackets_exact(self):
        a, b = self.field_pair_2d()
        exact = d0_distance(a, b, method="exact-lp").value
        res = d0_distance(a, b, method="bounds")
        assert res.lower - 1e-9 <= exact <= res.upper + 1e-9
        assert res.certificate is None

    def test_torus_wrap_sees_the_short_way_around(self):
        g = Grid.regular(4.0, (16, 16))
        h = g.spacing[0]
        w1 = np.zeros((16, 16))
        w1[0, 0] = 1.0
        w2 = np.zeros((16, 16))
        w2[-1, 0] = 1.0
        a = DiscreteMeasure.from_field(Field(g, w1 / (w1.sum() * g.cell_volume)))
        b = DiscreteMeasure.from_field(Field(g, w2 / (w2.sum() * g.cell_volume)))
        assert d0_distance(a, b).value == pytest.approx(h, abs=1e-12)
        assert d0_distance(a, b, method="grid-lp").value == pytest.approx(h, abs=1e-12)
        # the cheap lower estimate must stay admissible across the seam
        res = d0_distance(a, b, method="bounds")
        assert res.lower <= h + 1e-9

    def test_grid_route_requires_lattice_metadata(self):
        pts = np.array([[0.0], [1.0]])
        mu = DiscreteMeasure(pts, np.array([0.5, 0.5]))
        nu = DiscreteMeasure(pts, np.array([0.3, 0.7]))
        with pytest.raises(ValueError, match="grid"):
            d0_distance(mu, nu, method="grid-lp")


class TestPooling:
    def test_pooling_caps_cells_and_reports_uncertainty(self):
        g = Grid.regular(np.pi, 4096)
        x = g.axis_coordinates(0)
        v = np.exp(np.cos(x))
        f = Field(g, v / (v.sum() * g.cell_volume))
        m = DiscreteMeasure.from_field(f, max_cells=2000)
        assert m.points.shape[0] <= 2000
        assert m.pooling_error > 0
        assert m.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_pooled_distance_stays_within_stated_error(self):
        g = Grid.regular(np.pi, 256)
        x = g.axis_coordinates(0)
        v1 = np.exp(np.cos(x))
        v2 = np.exp(np.cos(x - 0.5))
        f1 = Field(g, v1 / (v1.sum() * g.cell_volume))
        f2 = Field(g, v2 / (v2.sum() * g.cell_volume))
        fine_a, fine_b = (DiscreteMeasure.from_field(f) for f in (f1, f2))
        coarse_a, coarse_b = (
            DiscreteMeasure.from_field(f, max_cells=64) for f in (f1, f2)
        )
        fine = d0_distance(fine_a, fine_b)
        coarse = d0_distance(coarse_a, coarse_b)
        budget = fine.uncertainty + coarse.uncertainty
        assert abs(fine.value - coarse.value) <= budget
        assert coarse.uncertainty == pytest.approx(
            2 * coarse_a.pooling_error, abs=1e-15
        )


class TestTrajectories:
    @staticmethod
    def measure_at(shift):
        g = Grid.regular(np.pi, 32)
        x = g.axis_coordinates(0)
        v = np.exp(np.cos(x - shift))
        return DiscreteMeasure.from_field(Field(g, v / (v.sum() * g.cell_volume)))

    def test_sup_and_argmax_over_time_nodes(self):
        times = np.array([0.0, 0.5, 1.0, 1.5])
        shifts = [0.0, 0.1, 0.4, 0.2]
        traj_a = [self.measure_at(0.0) for _ in times]
        traj_b = [self.measure_at(s) for s in shifts]
        gap = d0_trajectory_sup(times, traj_a, times, traj_b)
        assert gap.argmax_time == 1.0
        assert gap.sup == max(gap.values)
        assert gap.values[0] == pytest.approx(0.0, abs=1e-12)
        assert gap.values[2] > gap.values[1] > 0

    def test_misaligned_time_grids_are_rejected(self):
        m = self.measure_at(0.0)
        with pytest.raises(ValueError, match="time"):
            d0_trajectory_sup([0.0, 1.0], [m, m], [0.0, 1.5], [m, m])
        with pytest.raises(ValueError, match="time"):
            d0_trajectory_sup([0.0, 1.0], [m, m], [0.0], [m])


class TestValidation:
    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([1.2, -0.2]))

    def test_unnormalized_weights_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.6, 0.6]))

    def test_mismatched_supports_rejected(self):
        mu = DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
        nu = DiscreteMeasure(np.array([[0.0], [2.0]]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="support"):
            d0_distance(mu, nu)

    def test_oracle_refuses_large_supports(self):
        rng = np.random.default_rng(1)
        mu, nu = random_pair(rng, 7, 1)
        with pytest.raises(ValueError, match="6"):
            d0_brute_oracle(mu, nu)

    def test_exact_lp_refuses_oversized_supports(self):
        rng = np.random.default_rng(2)
        n = 2048
        pts = rng.uniform(-3, 3, (n, 1))
        mu = DiscreteMeasure(pts, np.full(n, 1.0 / n))
        nu = DiscreteMeasure(pts, rng.dirichlet(np.ones(n)))
        with pytest.raises(ValueError, match="2000"):
            d0_distance(mu, nu)
