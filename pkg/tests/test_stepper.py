import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsde import (BrownianKernel, CellField, Driver, SolverConfig, TimeGrid, apply,
                   assemble_density, build_spatial_grid, gradient, project, solve_backward,
                   step_explicit, step_hybrid, step_implicit, t_operator_explicit,
                   t_operator_implicit, terminal_coefficients)
from fbsde.analysis import solve_problem
from fbsde.errors import (NonConvergenceError, SingularJacobianError, StepError, UsageError)
from fbsde.problems import CALL_PARAMS, Payoff, differential_rates_driver, get_problem
from fbsde.semigroup import TransitionMatrix
from fbsde.stepper import zero_driver

from conftest import linear_driver, toy_problem

HAND_P = np.array([[0.6, 0.3, 0.0],
                   [0.2, 0.5, 0.2],
                   [0.0, 0.3, 0.6]])


def cubic_driver():
    return Driver(lambda t, x, y, z: y ** 3 + 0 * x, depends_on_z=False, depends_on_x=False,
                  gy=lambda t, x, y, z: 3 * y ** 2 + 0 * x)


def constant_driver(c):
    return Driver(lambda t, x, y, z: c + 0 * (x + y), depends_on_z=False, depends_on_x=False,
                  lipschitz_L=0.0)


class TestTerminalCoefficients:
    def test_constant(self):
        g = build_spatial_grid(0, 4, 6)
        np.testing.assert_array_equal(
            terminal_coefficients(Payoff(lambda x: 1 + 0 * x), g).values, np.ones(6))

    def test_absolute_value(self):
        g = build_spatial_grid(0, 4, 4)
        got = terminal_coefficients(Payoff(lambda x: np.abs(x - 1), (1.0,)), g).values
        np.testing.assert_allclose(got, [0.5, 0.5, 1.5, 2.5], atol=1e-14)

    def test_call_combination_kink_inside_cell(self):
        g = build_spatial_grid(0.9, 1.2, 3)  # kinks 0.95 and 1.05 are both interior
        phi = Payoff(lambda x: np.maximum(x - 0.95, 0) - 2 * np.maximum(x - 1.05, 0), (0.95, 1.05))

        def anti(x):  # antiderivative of phi
            return 0.5 * np.maximum(x - 0.95, 0) ** 2 - np.maximum(x - 1.05, 0) ** 2

        e = g.edges
        np.testing.assert_allclose(terminal_coefficients(phi, g).values,
                                   (anti(e[1:]) - anti(e[:-1])) / g.h, rtol=0, atol=1e-12)


class TestGradient:
    def test_constant(self):
        g = build_spatial_grid(0, 1, 8)
        assert np.all(gradient(CellField(np.full(8, 2.0), g), 1.0).values == 0)

    def test_linear_is_exact(self):
        g = build_spatial_grid(0, 4, 16)
        got = gradient(CellField(g.centers, g), 1.0).values
        assert np.all(got == 1.0)

    def test_sine_second_order(self):
        errs = []
        for n in (800, 1600):
            g = build_spatial_grid(-4, 4, n)
            f = project(lambda x: np.sin(math.pi * x / 2), g)
            d = gradient(f, 1.0).values[1:-1]
            exact = math.pi / 2 * np.cos(math.pi * g.centers[1:-1] / 2)
            errs.append(np.abs(d - exact).max())
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)

    def test_scales_with_sigma(self):
        g = build_spatial_grid(0, 4, 16)
        sig = CellField(np.linspace(0.1, 2, 16), g)
        np.testing.assert_allclose(gradient(CellField(g.centers, g), sig).values, sig.values)

    def test_upwind_needs_drift(self):
        g = build_spatial_grid(0, 1, 8)
        with pytest.raises(UsageError):
            gradient(CellField(np.zeros(8), g), 1.0, scheme="upwind")


class TestStepExplicit:
    g = build_spatial_grid(0, 3, 3)
    P = TransitionMatrix.from_dense(HAND_P, g, 0.1)
    v = CellField(np.array([1.0, -2.0, 0.5]), g)

    def test_zero_driver_is_transport(self):
        out = step_explicit(self.P, self.v, zero_driver(), 1.0, 0.1)
        assert np.array_equal(out.values, apply(self.P, self.v).values)

    def test_constant_driver(self):
        out = step_explicit(self.P, self.v, constant_driver(2.0), 1.0, 0.1)
        np.testing.assert_allclose(out.values, HAND_P @ self.v.values - 0.1 * 2.0 * HAND_P.sum(1),
                                   atol=1e-14)

    def test_hand_expanded_linear(self):
        out = step_explicit(self.P, self.v, linear_driver(1.0), 1.0, 0.1).values
        u = [1.0 - 0.1 * 1.0, -2.0 - 0.1 * -2.0, 0.5 - 0.1 * 0.5]
        expected = [0.6 * u[0] + 0.3 * u[1],
                    0.2 * u[0] + 0.5 * u[1] + 0.2 * u[2],
                    0.3 * u[1] + 0.6 * u[2]]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-14)

    def test_nonfinite_driver_names_cell(self):
        d = Driver(lambda t, x, y, z: np.where(x > 2, np.inf, y), depends_on_z=False)
        with pytest.raises(StepError, match="cell 2") as exc:
            step_explicit(self.P, self.v, d, 0.7, 0.1)
        assert exc.value.cell == 2 and exc.value.t == 0.7

    def test_rejects_z_driver(self):
        with pytest.raises(UsageError):
            step_explicit(self.P, self.v, Driver(lambda t, x, y, z: z), 1.0, 0.1)


class TestStepHybrid:
    def test_zero_driver_matches_explicit(self):
        g = build_spatial_grid(-1, 1, 20)
        P = assemble_density(BrownianKernel(), g, 0.01)
        v = project(np.cos, g)
        vh, _ = step_hybrid(P, v, zero_driver(), 0.0, 0.01)
        assert np.array_equal(vh.values, step_explicit(P, v, zero_driver(), 0.01, 0.01).values)

    def test_exact_cubic_root(self):
        g = build_spatial_grid(0, 3, 3)
        P = TransitionMatrix.from_dense(np.eye(3), g, 1.0)
        v, _ = step_hybrid(P, CellField(np.full(3, 2.0), g), cubic_driver(), 0.0, 1.0)
        np.testing.assert_allclose(v.values, 1.0, atol=1e-14)

    def test_fixed_point_and_newton_agree(self, rng):
        g = build_spatial_grid(0, 4, 200)
        P = TransitionMatrix.from_dense(np.eye(200), g, 0.01)
        drv = differential_rates_driver(CALL_PARAMS)
        v = CellField(rng.uniform(-1, 3, 200), g)
        sig = 0.2 * g.centers
        fp, _ = step_hybrid(P, v, drv, 0.0, 0.01, SolverConfig(inner="fixed_point"), sig)
        nt, _ = step_hybrid(P, v, drv, 0.0, 0.01, SolverConfig(inner="newton"), sig)
        np.testing.assert_allclose(fp.values, nt.values, rtol=0, atol=1e-10)

    def test_w_comes_from_next_level(self):
        g = build_spatial_grid(-1, 1, 20)
        P = assemble_density(BrownianKernel(), g, 0.01)
        v = project(np.sin, g)
        _, w = step_hybrid(P, v, linear_driver(0.5), 0.0, 0.01)
        assert np.array_equal(w.values, gradient(v, 1.0).values)

    def test_nonconvergence_reports_cell_and_residual(self):
        g = build_spatial_grid(0, 3, 3)
        P = TransitionMatrix.from_dense(np.eye(3), g, 1.0)
        with pytest.raises(NonConvergenceError) as exc:
            step_hybrid(P, CellField(np.full(3, 2.0), g), cubic_driver(), 0.0, 1.0,
                        SolverConfig(max_iter=2))
        assert exc.value.cell is not None and exc.value.residual > 0

    def test_singular_jacobian(self):
        g = build_spatial_grid(0, 3, 3)
        P = TransitionMatrix.from_dense(np.eye(3), g, 0.5)
        with pytest.raises(SingularJacobianError):
            step_hybrid(P, CellField(np.ones(3), g), linear_driver(-2.0), 0.0, 0.5,
                        SolverConfig(inner="newton"))


class TestStepImplicit:
    def test_z_free_driver_matches_hybrid_in_one_pass(self):
        g = build_spatial_grid(-1, 1, 20)
        P = assemble_density(BrownianKernel(), g, 0.01)
        v = project(np.cos, g)
        vi, _ = step_implicit(P, v, cubic_driver(), 0.0, 0.01)
        vh, _ = step_hybrid(P, v, cubic_driver(), 0.0, 0.01)
        assert np.array_equal(vi.values, vh.values)

    def test_zero_driver(self):
        g = build_spatial_grid(-1, 1, 20)
        P = assemble_density(BrownianKernel(), g, 0.01)
        v = project(np.cos, g)
        vi, wi = step_implicit(P, v, zero_driver(), 0.0, 0.01)
        assert np.array_equal(vi.values, apply(P, v).values)
        assert np.array_equal(wi.values, gradient(vi, 1.0).values)

    @staticmethod
    def _gaps(prob, t, dts, h=0.02, lo=None, hi=None):
        g = build_spatial_grid(prob.lo, prob.hi, round((prob.hi - prob.lo) / h), prob.periodic)
        sig = prob.kernel.sigma(g.centers)
        keep = np.ones(g.n_cells, bool) if lo is None else (g.centers > lo) & (g.centers < hi)
        v = project(lambda x: prob.analytic_v(t, x), g)
        gaps = []
        for dt in dts:
            P = assemble_density(prob.kernel, g, dt)
            vi, _ = step_implicit(P, v, prob.driver, t - dt, dt, SolverConfig(), sig)
            vh, _ = step_hybrid(P, v, prob.driver, t - dt, dt, SolverConfig(), sig)
            gaps.append(np.abs(vi.values - vh.values)[keep].max())
        return gaps

    def test_call_has_no_interior_z_coupling(self):
        # with mu = R the active branch of the call driver does not see z
        gaps = self._gaps(get_problem("call"), 1.0, (0.02, 0.01), lo=0.25, hi=3.0)
        assert max(gaps) <= 1e-12

    @pytest.mark.parametrize("name, lo, hi, rel", [("example1", None, None, 0.05),
                                                   ("straddle", 0.25, 3.0, 0.15)])
    def test_differs_from_hybrid_at_second_order(self, name, lo, hi, rel):
        gaps = self._gaps(get_problem(name), 1.0, (0.02, 0.01, 0.005), lo=lo, hi=hi)
        for a, b in zip(gaps, gaps[1:]):
            assert a / b == pytest.approx(4.0, rel=rel)

    def test_residual_within_tolerance(self):
        prob = get_problem("example3")
        g = build_spatial_grid(-4, 4, 160, periodic=True)
        P = assemble_density(prob.kernel, g, 0.05)
        cfg = SolverConfig(algorithm="implicit", tol=1e-12)
        v = project(lambda x: prob.analytic_v(1.0, x), g)
        vi, wi = step_implicit(P, v, prob.driver, 0.95, 0.05, cfg)
        nodes, weights = g.quadrature_nodes(cfg.quad_order)
        gbar = prob.driver(0.95, nodes, vi.values[:, None], wi.values[:, None]) @ weights
        resid = np.abs(vi.values + 0.05 * gbar - apply(P, v).values)
        # the Picard loop stops on outer_tol, so allow its size too
        assert resid.max() <= 10 * max(cfg.tol, cfg.outer_tol)


class TestSolveBackward:
    def test_constants_are_invariant(self, grid800):
        prob = toy_problem(zero_driver(), payoff=lambda x: 1 + 0 * x, lo=-4, hi=4, x0=0.0,
                           horizon=0.25)
        tg = TimeGrid(0.25, 25)
        P = assemble_density(prob.kernel, grid800, tg.dt)
        s = solve_backward(prob, grid800, tg, P, SolverConfig(algorithm="explicit"))
        assert abs(s.y0 - 1) <= 1e-9

    def test_linear_driver_closed_form(self):
        lam = 0.7
        prob = toy_problem(linear_driver(lam))
        g = build_spatial_grid(-1, 1, 40)
        tg = TimeGrid(1.0, 10)
        P = assemble_density(prob.kernel, g, tg.dt)
        s = solve_backward(prob, g, tg, P, SolverConfig(algorithm="explicit"))
        u = terminal_coefficients(prob.payoff, g).values
        for _ in range(10):
            u = P.matrix @ u
        np.testing.assert_allclose(s.v[0], (1 - lam * tg.dt) ** 10 * u, rtol=0, atol=1e-12)

    def test_example1_error_scale(self):
        res = solve_problem(get_problem("example1"), 0.02)
        assert 0.0327 / 2 <= res.e_v <= 0.0327 * 2

    def test_step_error_carries_k(self):
        d = Driver(lambda t, x, y, z: np.where(t < 0.45, np.nan, 0.0) + 0 * y,
                   depends_on_z=False, depends_on_x=False)
        prob = toy_problem(d)
        g = build_spatial_grid(-1, 1, 10)
        tg = TimeGrid(1.0, 10)
        P = assemble_density(prob.kernel, g, tg.dt)
        # the explicit step k evaluates g at t_{k+1}, so k = 3 is the first to see t < 0.45
        with pytest.raises(StepError, match="k=3") as exc:
            solve_backward(prob, g, tg, P, SolverConfig(algorithm="explicit"))
        assert exc.value.k == 3

    def test_dt_mismatch(self):
        prob = toy_problem(zero_driver())
        g = build_spatial_grid(-1, 1, 10)
        P = assemble_density(prob.kernel, g, 0.2)
        with pytest.raises(UsageError):
            solve_backward(prob, g, TimeGrid(1.0, 10), P)

    def test_deterministic(self):
        prob = get_problem("example3")
        g = build_spatial_grid(-4, 4, 100, periodic=True)
        tg = TimeGrid(2.0, 100)
        P = assemble_density(prob.kernel, g, tg.dt)
        a = solve_backward(prob, g, tg, P, SolverConfig(algorithm="implicit"))
        b = solve_backward(prob, g, tg, P, SolverConfig(algorithm="implicit"))
        assert np.array_equal(a.v, b.v) and np.array_equal(a.w, b.w)


class TestTOperators:
    g = build_spatial_grid(0, 1, 5)

    def test_zero_driver(self):
        f = CellField(np.linspace(-1, 1, 5), self.g)
        assert np.array_equal(t_operator_explicit(0.1, 0.0, f, zero_driver()).values, f.values)
        assert np.array_equal(t_operator_implicit(0.1, 0.0, f, zero_driver()).values, f.values)

    def test_zero_step(self):
        f = CellField(np.linspace(-1, 1, 5), self.g)
        assert np.array_equal(t_operator_explicit(0.0, 0.0, f, cubic_driver()).values, f.values)
        assert np.array_equal(t_operator_implicit(0.0, 0.0, f, cubic_driver()).values, f.values)

    def test_explicit_linear(self):
        out = t_operator_explicit(0.1, 0.0, CellField(np.full(5, 3.0), self.g), linear_driver(1.0))
        np.testing.assert_allclose(out.values, 2.7, rtol=1e-15)

    @pytest.mark.parametrize("v, expected", [(0.0, 0.0), (2.0, 1.0)])
    def test_implicit_cubic(self, v, expected):
        out = t_operator_implicit(1.0, 0.0, CellField(np.full(5, v), self.g), cubic_driver())
        np.testing.assert_allclose(out.values, expected, atol=1e-14)


# properties ---------------------------------------------------------------

field_pairs = st.tuples(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 0.2))


def _random_pair(seed, n=30, scale=2.0):
    r = np.random.default_rng(seed)
    return r.uniform(-scale, scale, n), r.uniform(-scale, scale, n)


@settings(max_examples=100, deadline=None)
@given(field_pairs, st.floats(0.1, 5.0))
def test_explicit_t_operator_lipschitz(pair, L):
    seed, dt = pair
    g = build_spatial_grid(0, 1, 30)
    drv = Driver(lambda t, x, y, z: L * np.sin(y) + np.cos(x), depends_on_z=False, lipschitz_L=L)
    a, b = _random_pair(seed)
    Ta = t_operator_explicit(dt, 0.3, CellField(a, g), drv).values
    Tb = t_operator_explicit(dt, 0.3, CellField(b, g), drv).values
    h = g.h
    lhs = math.sqrt(((Ta - Tb) ** 2).sum() * h)
    rhs = (1 + L * dt) * math.sqrt(((a - b) ** 2).sum() * h)
    assert lhs <= rhs * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(field_pairs, st.floats(0.1, 3.0))
def test_implicit_t_operator_lipschitz(pair, c):
    seed, dt = pair
    dt = min(dt, 0.5 / c)  # |gamma| dt <= 1/2
    g = build_spatial_grid(0, 1, 30)
    drv = Driver(lambda t, x, y, z: y ** 3 - c * y + 0 * x, depends_on_z=False,
                 depends_on_x=False, gy=lambda t, x, y, z: 3 * y ** 2 - c + 0 * x,
                 monotone_gamma=-c)
    a, b = _random_pair(seed)
    Ta = t_operator_implicit(dt, 0.0, CellField(a, g), drv).values
    Tb = t_operator_implicit(dt, 0.0, CellField(b, g), drv).values
    h = g.h
    lhs = math.sqrt(((Ta - Tb) ** 2).sum() * h)
    rhs = (1 + 2 * c * dt) * math.sqrt(((a - b) ** 2).sum() * h)
    assert lhs <= rhs * (1 + 1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 40), st.integers(1, 8), st.floats(0.05, 2.0))
def test_zero_driver_algorithms_coincide(n, N, sig):
    prob = toy_problem(zero_driver(), kernel=BrownianKernel(0.1, sig))
    g = build_spatial_grid(-1, 1, n)
    tg = TimeGrid(1.0, N)
    P = assemble_density(prob.kernel, g, tg.dt)
    surfaces = [solve_backward(prob, g, tg, P, SolverConfig(algorithm=a)).v
                for a in ("explicit", "hybrid", "implicit")]
    assert np.array_equal(surfaces[0], surfaces[1]) and np.array_equal(surfaces[1], surfaces[2])
