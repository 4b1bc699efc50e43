import numpy as np
import pytest

from levymfg.heat_kernel import build_propagator
from levymfg.hjb_solver import (
    Hamiltonian,
    HJBInput,
    PicardConfig,
    PicardDivergence,
    comparison_diagnostic,
    eikonal_hamiltonian,
    hamiltonian_consistency_check,
    lipschitz_diagnostic,
    quadratic_hamiltonian,
    solve_hjb_backward,
    strong_form_residual,
    sup_bound_diagnostic,
    zero_hamiltonian,
)
from levymfg.levy_ops import IsotropicStable, build_symbol
from levymfg.spectral_core import Field, Grid

GRID = Grid.regular(np.pi, 256)
X = GRID.axis_coordinates(0)
SYMBOL = build_symbol(IsotropicStable(sigma=1.5, dim=1), GRID)


def manufactured_source(t, mesh):
    # - d/dt - L + H applied to e^{-t} cos x with H = |p|^2/2 and a symbol
    # normalized so the generator maps cos to -cos
    return 2 * np.exp(-t) * np.cos(mesh[0]) + 0.5 * np.exp(-2 * t) * np.sin(
        mesh[0]
    ) ** 2


def manufactured_input(n_steps, sigma=1.5, horizon=1.0):
    sym = (
        SYMBOL
        if sigma == 1.5
        else build_symbol(IsotropicStable(sigma=sigma, dim=1), GRID)
    )
    terminal = Field(GRID, np.exp(-horizon) * np.cos(X))
    return HJBInput(
        quadratic_hamiltonian(),
        terminal,
        sym,
        horizon,
        n_steps,
        source=manufactured_source,
    )


def manufactured_error(sol):
    return max(
        float(np.max(np.abs(sol.fields[k].values - np.exp(-t) * np.cos(X))))
        for k, t in enumerate(sol.times)
    )


def stiff_hamiltonian(scale):
    return Hamiltonian(
        eval_h=lambda mesh, u, p: scale * 0.5 * sum(pk**2 for pk in p),
        grad_p=lambda mesh, u, p: tuple(scale * pk for pk in p),
        preset="stiff-quadratic",
        local_bound=lambda R: scale * max(0.5 * R * R, R, 1.0),
    )


class TestHamiltonians:
    @pytest.mark.parametrize(
        "ham", [quadratic_hamiltonian(), eikonal_hamiltonian(), zero_hamiltonian()]
    )
    @pytest.mark.parametrize("dim", [1, 2])
    def test_structural_consistency(self, ham, dim):
        report = hamiltonian_consistency_check(ham, dim, seed=3)
        assert report["grad_p_consistent"]
        assert report["monotone_in_u"]

    def test_preset_values(self):
        q = quadratic_hamiltonian()
        e = eikonal_hamiltonian()
        p = (np.array([3.0]), np.array([4.0]))
        mesh = (np.zeros(1), np.zeros(1))
        assert q.eval_h(mesh, np.zeros(1), p)[0] == pytest.approx(12.5)
        assert e.eval_h(mesh, np.zeros(1), p)[0] == pytest.approx(
            np.sqrt(26.0) - 1.0
        )
        assert e.dp_bound == 1.0
        # eikonal gradient has magnitude < 1 always
        g = e.grad_p(mesh, np.zeros(1), p)
        assert np.hypot(g[0][0], g[1][0]) < 1.0


class TestLinearReduction:
    def test_zero_hamiltonian_is_exact_heat_flow(self):
        terminal = Field(GRID, np.cos(X) + 0.3 * np.sin(2 * X))
        inp = HJBInput(zero_hamiltonian(), terminal, SYMBOL, 1.0, 16)
        sol = solve_hjb_backward(inp)
        spec0 = np.fft.fftn(terminal.values)
        for k, t in enumerate(sol.times):
            direct = np.fft.ifftn(
                build_propagator(SYMBOL, 1.0 - t).values * spec0
            ).real
            assert np.max(np.abs(sol.fields[k].values - direct)) < 1e-8

    def test_zero_hamiltonian_contracts_immediately(self):
        inp = HJBInput(zero_hamiltonian(), Field(GRID, np.cos(X)), SYMBOL, 0.5, 4)
        sol = solve_hjb_backward(inp)
        assert all(r == 0.0 for r in sol.contraction_ratios)
        assert all(s == 1 for s in sol.picard_sweeps)


class TestManufactured:
    @pytest.mark.parametrize("sigma", [1.3, 1.5, 1.8])
    def test_recovers_analytic_solution(self, sigma):
        sol = solve_hjb_backward(manufactured_input(32, sigma=sigma))
        assert manufactured_error(sol) < 2e-4

    def test_first_order_or_better_in_dt(self):
        errs = {
            n: manufactured_error(solve_hjb_backward(manufactured_input(n)))
            for n in (32, 64, 128)
        }
        assert errs[128] < 1.2e-5
        order = np.polyfit(
            np.log([1 / 32, 1 / 64, 1 / 128]), np.log([errs[n] for n in (32, 64, 128)]), 1
        )[0]
        assert order >= 1.0

    def test_duhamel_residuals_within_picard_tol(self):
        inp = manufactured_input(64)
        sol = solve_hjb_backward(inp)
        assert sol.duhamel_residuals.max() <= inp.picard.tol

    def test_strong_form_residual_first_order(self):
        res = {
            n: strong_form_residual(solve_hjb_backward(manufactured_input(n)))["max"]
            for n in (32, 128)
        }
        assert res[128] < 1.2e-5
        assert np.log(res[32] / res[128]) / np.log(4.0) >= 1.0


class TestAPrioriBounds:
    @staticmethod
    def random_problem(seed, ham=None, horizon=1.0, n_steps=16):
        rng = np.random.default_rng(seed)
        terminal = Field(
            GRID,
            sum(
                rng.uniform(-0.5, 0.5) * np.cos(k * X + rng.uniform(0, 2 * np.pi))
                for k in range(1, 4)
            ),
        )
        amps = rng.uniform(-0.5, 0.5, 3)
        phases = rng.uniform(0, 2 * np.pi, 3)

        def source(t, mesh):
            return sum(
                a * np.exp(-t) * np.cos((k + 1) * mesh[0] + p)
                for k, (a, p) in enumerate(zip(amps, phases))
            )

        return HJBInput(
            ham or quadratic_hamiltonian(), terminal, SYMBOL, horizon, n_steps,
            source=source,
        )

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_sup_bound_on_random_smooth_problems(self, seed):
        sol = solve_hjb_backward(self.random_problem(seed))
        report = sup_bound_diagnostic(sol)
        assert report["satisfied"]
        assert report["max_sup_norm"] <= report["bound"]

    def test_sup_bound_with_eikonal(self):
        sol = solve_hjb_backward(self.random_problem(5, ham=eikonal_hamiltonian()))
        assert sup_bound_diagnostic(sol)["satisfied"]

    def test_constant_data_stays_constant(self):
        # H = H(p) with H(0) = 0, f = 0, constant G: u is constant in x
        inp = HJBInput(
            quadratic_hamiltonian(), Field(GRID, 0.7 * np.ones(256)), SYMBOL, 1.0, 8
        )
        sol = solve_hjb_backward(inp)
        report = lipschitz_diagnostic(sol)
        assert report["max_gradient_norm"] < 1e-12
        assert report["satisfied"]

    def test_manufactured_gradient_matches_analytic(self):
        sol = solve_hjb_backward(manufactured_input(64))
        # Du* = -e^{-t} sin x peaks at t=0 with sup exactly 1
        report = lipschitz_diagnostic(sol)
        assert report["max_gradient_norm"] == pytest.approx(1.0, abs=1e-3)
        assert report["satisfied"]

    def test_gradient_bound_grows_with_horizon_and_holds(self):
        bounds = []
        for horizon in (0.5, 1.0, 2.0):
            inp = HJBInput(
                quadratic_hamiltonian(),
                Field(GRID, np.exp(-horizon) * np.cos(X)),
                SYMBOL,
                horizon,
                max(8, int(16 * horizon)),
                source=manufactured_source,
            )
            report = lipschitz_diagnostic(solve_hjb_backward(inp))
            assert report["satisfied"]
            bounds.append(report["m_t_bound"])
        assert bounds[0] < bounds[1] < bounds[2]


class TestComparison:
    @staticmethod
    def solve_pair(g1_vals, g2_vals, n_steps=8, horizon=0.5):
        ham = quadratic_hamiltonian()

        def source(t, mesh):
            return 0.3 * np.exp(-t) * np.cos(mesh[0])

        base = dict(
            hamiltonian=ham, symbol=SYMBOL, horizon=horizon, n_steps=n_steps,
            source=source,
        )
        s1 = solve_hjb_backward(HJBInput(terminal=Field(GRID, g1_vals), **base))
        s2 = solve_hjb_backward(HJBInput(terminal=Field(GRID, g2_vals), **base))
        return s1, s2

    def test_equal_data_gives_zero_gap(self):
        g = 0.4 * np.cos(X)
        s1, s2 = self.solve_pair(g, g.copy())
        report = comparison_diagnostic(s1, s2)
        assert report["min_gap"] == 0.0
        assert report["satisfied"]

    def test_additive_shift_passes_through_exactly(self):
        # H depends on p only, so shifting G by a constant shifts u by it
        g = 0.4 * np.cos(X)
        s1, s2 = self.solve_pair(g, g + 1.0)
        for k in range(len(s1.times)):
            gap = s2.fields[k].values - s1.fields[k].values
            assert np.max(np.abs(gap - 1.0)) < 1e-8

    def test_nonnegative_bump_preserves_order(self):
        g = 0.4 * np.cos(X)
        bump = 0.3 * np.exp(-4 * (X - 0.7) ** 2)
        s1, s2 = self.solve_pair(g, g + bump)
        assert comparison_diagnostic(s1, s2)["satisfied"]

    def test_twenty_random_ordered_pairs(self):
        rng = np.random.default_rng(123)
        small = Grid.regular(np.pi, 64)
        xs = small.axis_coordinates(0)
        sym = build_symbol(IsotropicStable(sigma=1.5, dim=1), small)
        ham = quadratic_hamiltonian()
        for trial in range(20):
            g1 = sum(
                rng.uniform(-0.3, 0.3) * np.cos(k * xs + rng.uniform(0, 7))
                for k in range(1, 3)
            )
            lift = rng.uniform(0, 0.4) * (1 + np.cos(xs + rng.uniform(0, 7)))
            base = dict(hamiltonian=ham, symbol=sym, horizon=0.5, n_steps=8)
            s1 = solve_hjb_backward(HJBInput(terminal=Field(small, g1), **base))
            s2 = solve_hjb_backward(
                HJBInput(terminal=Field(small, g1 + lift), **base)
            )
            assert comparison_diagnostic(s1, s2)["satisfied"]

    def test_mismatched_problems_rejected(self):
        g = 0.4 * np.cos(X)
        s1, _ = self.solve_pair(g, g + 1.0)
        other = solve_hjb_backward(
            HJBInput(quadratic_hamiltonian(), Field(GRID, g), SYMBOL, 0.5, 8)
        )
        with pytest.raises(ValueError, match="different problems"):
            comparison_diagnostic(s1, other)

    def test_unordered_terminal_data_rejected(self):
        g = 0.4 * np.cos(X)
        s1, s2 = self.solve_pair(g, g - 0.1)
        with pytest.raises(ValueError, match="ordered"):
            comparison_diagnostic(s1, s2)


class TestWindows:
    def test_stiff_problem_exercises_bisection(self):
        inp = HJBInput(
            stiff_hamiltonian(12.0),
            Field(GRID, 0.8 * np.cos(X)),
            SYMBOL,
            1.0,
            32,
            picard=PicardConfig(window=1.0, max_sweeps=25),
        )
        sol = solve_hjb_backward(inp)
        assert sol.bisections > 0
        assert all(r < 1.0 for r in sol.contraction_ratios)
        assert sol.duhamel_residuals.max() <= inp.picard.tol

    def test_hopeless_stiffness_reports_divergence(self):
        inp = HJBInput(
            stiff_hamiltonian(4000.0),
            Field(GRID, 0.9 * np.cos(X)),
            SYMBOL,
            1.0,
            4,
            picard=PicardConfig(window=1.0, max_sweeps=20),
        )
        with pytest.raises(PicardDivergence) as err:
            solve_hjb_backward(inp)
        assert err.value.ratio >= 1.0

    def test_small_window_contracts_fast(self):
        sol = solve_hjb_backward(manufactured_input(32))
        assert max(sol.contraction_ratios) < 0.5


class TestValidation:
    def test_nan_hamiltonian_is_input_error(self):
        bad = Hamiltonian(
            eval_h=lambda mesh, u, p: np.full_like(u, np.nan),
            grad_p=lambda mesh, u, p: p,
            preset="bad",
        )
        inp = HJBInput(bad, Field(GRID, np.cos(X)), SYMBOL, 0.5, 4)
        with pytest.raises(ValueError, match="non-finite"):
            solve_hjb_backward(inp)

    def test_subcritical_symbol_order_rejected(self):
        rough = build_symbol(IsotropicStable(sigma=0.8, dim=1), GRID)
        with pytest.raises(ValueError, match="order"):
            HJBInput(quadratic_hamiltonian(), Field(GRID, np.cos(X)), rough, 1.0, 4)

    def test_nonfinite_terminal_rejected(self):
        vals = np.cos(X)
        vals[3] = np.inf
        with pytest.raises(ValueError, match="finite"):
            HJBInput(quadratic_hamiltonian(), Field(GRID, vals), SYMBOL, 1.0, 4)

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError, match="step"):
            HJBInput(quadratic_hamiltonian(), Field(GRID, np.cos(X)), SYMBOL, 1.0, 0)
