import numpy as np
import pytest
from scipy.integrate import quad

from homoscale.cell_solver import (
    CellProblem,
    DivFormOperator,
    krylov_solve,
    lifted_residual,
    residual_inner,
    solve_cell_array,
    solve_inner,
    solve_lifted,
)
from homoscale.config import SolverConfig
from homoscale.errors import SolverError, ValidationError
from homoscale.torus_field import GridSpec, ScaleVector, TorusField, grad_block

TWO_PI = 2 * np.pi


def _identity(g):
    return TorusField.constant(g, np.eye(g.d))


def _scalar_a(g, func):
    return TorusField.from_function(g, lambda y: func(y)[None, None])


def _y(g):
    return np.arange(g.resolution[-1]) / g.resolution[-1]


class TestSolveInner:
    @pytest.mark.parametrize("d", [1, 2])
    def test_single_mode_flux(self, d):
        g = GridSpec.uniform(d, 1, 16)
        F = TorusField.from_function(g, lambda y: np.stack(
            [np.sin(TWO_PI * y[0][0]) + 0 * y[0][-1]] + [0 * y[0][0] + 0 * y[0][-1]] * (d - 1)))
        Y, diag = solve_inner(CellProblem(_identity(g), F=F))
        expect = TorusField.from_function(g, lambda y: np.cos(TWO_PI * y[0][0]) / TWO_PI + 0 * y[0][-1])
        assert np.abs(Y.values - expect.values).max() < 1e-12
        assert diag.converged and diag.relative_residual <= 1e-10

    def test_single_mode_zero_order(self):
        g = GridSpec.uniform(2, 1, 16)
        G = TorusField.from_function(g, lambda y: np.cos(TWO_PI * y[0][0]) + 0 * y[0][1])
        Y, _ = solve_inner(CellProblem(_identity(g), G=G, tau=1.0))
        np.testing.assert_allclose(Y.values, G.values / (4 * np.pi**2 + 1), atol=1e-13)

    def test_one_d_corrector_against_quadrature(self, sqrt8):
        g = GridSpec.uniform(1, 1, 64)
        A = _scalar_a(g, lambda y: 3 + np.sin(TWO_PI * y[0][0]))
        F = TorusField(g, A.values[:, 0])
        Y, _ = solve_inner(CellProblem(A, F=F))
        y = _y(g)
        # oracle: Y(y) = int_0^y (abar/a - 1) - mean, by adaptive quadrature
        prim = np.array([quad(lambda t: sqrt8 / (3 + np.sin(TWO_PI * t)) - 1, 0, s, epsabs=1e-14)[0] for s in y])
        mean = quad(lambda s: quad(lambda t: sqrt8 / (3 + np.sin(TWO_PI * t)) - 1, 0, s, epsabs=1e-14)[0],
                    0, 1, epsabs=1e-13)[0]
        assert np.abs(Y.values - (prim - mean)).max() <= 1e-8
        flux = A.values[0, 0] * (1 + grad_block(Y.values, g, 0)[0])
        assert np.abs(flux - sqrt8).max() <= 1e-8

    def test_parametric_outer_nodes(self):
        g = GridSpec.uniform(1, 2, 16)
        A = _scalar_a(g, lambda y: 3 + np.sin(TWO_PI * y[0][0]) + np.sin(TWO_PI * y[1][0]))
        Y, diag = solve_inner(CellProblem(A, F=TorusField(g, A.values[:, 0])))
        assert diag.iterations.shape == (16,)
        assert np.abs(Y.values.mean(axis=-1)).max() < 1e-13

    def test_solvability_violation(self):
        g = GridSpec.uniform(1, 1, 8)
        G = TorusField.constant(g, 1.0)
        with pytest.raises(ValidationError):
            solve_inner(CellProblem(_identity(g), G=G, tau=0.0))

    def test_non_convergence_reports_node(self):
        g = GridSpec.uniform(1, 2, 16)
        A = _scalar_a(g, lambda y: 3 + 2.5 * np.sin(TWO_PI * y[1][0]) * (1 + 0 * y[0][0]))
        F = TorusField(g, A.values[:, 0])
        with pytest.raises(SolverError) as info:
            solve_inner(CellProblem(A, F=F), cfg=SolverConfig(maxiter=1))
        assert info.value.worst_node is not None

    def test_bad_tol(self):
        g = GridSpec.uniform(1, 1, 8)
        with pytest.raises(ValidationError):
            solve_inner(CellProblem(_identity(g), G=TorusField.constant(g, 0.0)), tol=0)

    def test_nonsymmetric_matrix_uses_transpose_free_method(self):
        g = GridSpec.uniform(2, 1, 16)

        def a(y):
            s = np.sin(TWO_PI * y[0][0]) + 0 * y[0][1]
            return np.array([[3 + s, 0.5 + 0 * s], [-0.5 + 0 * s, 2 + 0.5 * np.cos(TWO_PI * y[0][1]) + 0 * s]])

        A = TorusField.from_function(g, a)
        F = TorusField(g, A.values[:, 0])
        Y, diag = solve_inner(CellProblem(A, F=F))
        assert diag.method == "bicgstab"
        assert residual_inner(CellProblem(A, F=F), Y) <= 1e-9 * np.sqrt((CellProblem(A, F=F).rhs() ** 2).mean())


class TestResidual:
    def test_exact_solution(self):
        g = GridSpec.uniform(1, 1, 16)
        G = TorusField.from_function(g, lambda y: np.cos(TWO_PI * y[0][0]))
        p = CellProblem(_identity(g), G=G, tau=1.0)
        Y = TorusField(g, G.values / (4 * np.pi**2 + 1))
        assert residual_inner(p, Y) <= 1e-10

    def test_zero_guess(self):
        g = GridSpec.uniform(1, 1, 16)
        G = TorusField.from_function(g, lambda y: np.cos(TWO_PI * y[0][0]))
        p = CellProblem(_identity(g), G=G, tau=1.0)
        assert residual_inner(p, TorusField.constant(g, 0.0)) == pytest.approx(1 / np.sqrt(2), rel=1e-12)

    def test_perturbation(self):
        g = GridSpec.uniform(1, 1, 16)
        G = TorusField.from_function(g, lambda y: np.cos(TWO_PI * y[0][0]))
        p = CellProblem(_identity(g), G=G, tau=1.0)
        Y, _ = solve_inner(p)
        base = residual_inner(p, Y)
        bumped = residual_inner(p, Y + 1e-3 * np.sin(TWO_PI * _y(g)))
        assert bumped - base == pytest.approx((4 * np.pi**2 + 1) * 1e-3 / np.sqrt(2), rel=1e-2)


class TestInvariants:
    def _problem(self, res=32, tau=0.0):
        g = GridSpec.uniform(1, 1, res)
        A = _scalar_a(g, lambda y: 3 + np.sin(TWO_PI * y[0][0]))
        F = TorusField(g, A.values[:, 0])
        return CellProblem(A, F=F, tau=tau)

    def test_linearity(self):
        p = self._problem()
        G = TorusField.from_function(p.grid, lambda y: np.sin(TWO_PI * 2 * y[0][0]))
        y1, _ = solve_inner(p)
        y2, _ = solve_inner(CellProblem(p.A, G=G))
        y3, _ = solve_inner(CellProblem(p.A, F=p.F * 2.0, G=G * -3.0))
        np.testing.assert_allclose(y3.values, 2 * y1.values - 3 * y2.values, atol=1e-10)

    def test_uniqueness_from_different_guesses(self, rng):
        p = self._problem()
        op = p.operator(SolverConfig())
        x0 = op.project(rng.standard_normal(p.grid.shape))
        a, _ = krylov_solve(op, p.rhs())
        b, _ = krylov_solve(op, p.rhs(), x0=x0)
        assert np.abs(a - b).max() <= 1e-9

    def test_refinement(self):
        coarse, _ = solve_inner(self._problem(32))
        fine, _ = solve_inner(self._problem(64))
        assert np.abs(fine.values[..., ::2] - coarse.values).max() <= 1e-8

    def test_energy_certificate_is_stable(self):
        consts = []
        for res in (32, 64):
            p = self._problem(res, tau=0.1)
            _, diag = solve_inner(p)
            norm_f = float(np.sqrt((p.F.values**2).sum(axis=0).mean()))
            consts.append(diag.energy_constant(norm_f))
        assert np.isfinite(consts).all() and consts[0] > 0
        assert consts[1] == pytest.approx(consts[0], rel=1e-8)


class TestLiftedReference:
    def test_lifted_solve_has_small_residual(self, two_scale_field):
        sc = ScaleVector((1.0, 1 / 8))
        X, diag = solve_lifted(two_scale_field, sc, tau=1e-2)
        res = lifted_residual(two_scale_field, sc, X, tau=1e-2)
        assert np.abs(res).max() <= 1e-7
        assert diag.converged

    def test_solve_cell_array_batches(self):
        g = GridSpec.uniform(1, 1, 16)
        a = np.broadcast_to((3 + np.sin(TWO_PI * _y(g)))[None, None], (1, 1, 16))
        rhs = np.stack([np.cos(TWO_PI * _y(g)), np.sin(2 * TWO_PI * _y(g))])
        y, _ = solve_cell_array(a, rhs, 1, 0.0)
        for i in range(2):
            yi, _ = solve_cell_array(a, rhs[i], 1, 0.0)
            np.testing.assert_allclose(y[i], yi, atol=1e-12)
        op = DivFormOperator(a, (16,), np.eye(1), 0.0, True)
        np.testing.assert_allclose(op(y), rhs, atol=1e-9)
