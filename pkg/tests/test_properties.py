import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from homoscale.bvp import solve_fine_1d, solve_fine_2d
from homoscale.cell_solver import CellProblem, solve_inner
from homoscale.config import SeparationConfig
from homoscale.corrector import build_corrector, choose_parameters
from homoscale.effective import effective_matrix, random_ellipticity
from homoscale.flux import build_flux
from homoscale.pipeline import group_scales, homogenize, sin_modes, toy_averaging
from homoscale.torus_field import (
    AnalyticCoefficient,
    GridSpec,
    ScaleVector,
    TorusField,
    build_field,
    check_ellipticity,
)

SEP = SeparationConfig(c_gap=0.25)
TWO_PI = 2 * np.pi

amp = st.floats(-1.0, 1.0, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


def _two_scale(a1, a2, a12):
    return AnalyticCoefficient.isotropic(1, 2, 3.0, [
        (((1,), (0,)), a1, "sin"), (((0,), (1,)), a2, "cos"), (((1,), (1,)), a12, "cos")])


def _planar(a, b, c):
    return AnalyticCoefficient.isotropic(2, 2, 4.0, [
        (((1, 0), (0, 0)), a, "cos"), (((0, 1), (0, 0)), 0.5, "sin"),
        (((0, 0), (1, 1)), b, "cos"), (((0, 0), (0, 1)), c, "sin")])


@given(seeds, st.sampled_from([(1, 1, 8), (2, 1, 6), (1, 2, 4)]))
def test_parseval(seed, shape):
    d, n, r = shape
    g = GridSpec.uniform(d, n, r)
    f = TorusField(g, np.random.default_rng(seed).standard_normal((2,) + g.shape))
    energy = (np.abs(f.spectrum) ** 2).sum()
    assert math.isclose(energy, f.l2_norm() ** 2, rel_tol=1e-12)


@settings(max_examples=10)
@given(amp, amp, st.floats(-0.5, 0.5), st.sampled_from([8, 12, 16]))
def test_corrector_zero_mean_and_elliptic(a1, a2, a12, q):
    A = build_field(_two_scale(a1, a2, a12), GridSpec.uniform(1, 2, 32))
    sc = ScaleVector((1.0, 1 / q))
    cs = build_corrector(A, sc, choose_parameters(sc, SEP))
    assert abs(cs.X.values.mean()) <= 1e-9 * max(1.0, cs.sup_norm())
    Abar = effective_matrix(A, cs, sc)
    lo, _ = check_ellipticity(A.values, 1e-3)
    assert random_ellipticity(Abar, lo - 1e-8, samples=1000)[0]


@settings(max_examples=5)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-0.5, 0.5))
def test_flux_antisymmetry_bitwise(a, b, c):
    A = build_field(_planar(a, b, c), GridSpec.uniform(2, 2, 8))
    sc = ScaleVector((1.0, 1 / 8))
    cs = build_corrector(A, sc, choose_parameters(sc, SEP).with_tau(1e-3))
    Abar = effective_matrix(A, cs, sc)
    assert random_ellipticity(Abar, 4.0 - 1.0 - 0.5 - 1.0 - 0.5 - 1e-8, samples=1000)[0]
    P = build_flux(A, cs, Abar, sc).Phi.values
    assert np.array_equal(P, -np.swapaxes(P, 0, 1))


@settings(max_examples=10)
@given(seeds, st.floats(-5, 5), st.floats(0.0, 1.0))
def test_cell_solve_linear(seed, alpha, tau):
    g = GridSpec.uniform(1, 1, 32)
    rng = np.random.default_rng(seed)
    y = g.coords()[0][0]
    A = TorusField(g, (2 + np.sin(TWO_PI * y) * rng.uniform(-1, 1))[None, None])
    F1, F2 = (TorusField(g, rng.standard_normal((1,) + g.shape)) for _ in range(2))
    solve = lambda F: solve_inner(CellProblem(A, F=F, tau=tau), tol=1e-13)[0].values
    lhs = solve(F1 + F2 * alpha)
    rhs = solve(F1) + alpha * solve(F2)
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(rhs).max())


@given(st.lists(st.floats(1e-8, 1.0), min_size=2, max_size=3, unique=True),
       st.floats(0.05, 1.0))
def test_grouping_idempotent_and_breakpoint(raw, c):
    eps = tuple(sorted(raw, reverse=True))
    sep = SeparationConfig(c_gap=c)
    g = group_scales(eps, sep)
    assert g == group_scales(eps, sep)
    assert g == group_scales(ScaleVector(eps), sep)
    flat = [i for grp in g.groups for i in grp]
    assert flat == list(range(1, len(eps) + 1))
    if g.branch == 2:
        ratio, bound = g.breakpoint
        assert ratio <= bound


@given(st.floats(0.5, 10.0), st.lists(st.floats(1e-6, 1e-1), min_size=1, max_size=3))
def test_homogenize_constant_identity(c, raw):
    eps = tuple(sorted(set(raw), reverse=True))
    A = AnalyticCoefficient.isotropic(1, len(eps), c)
    r = homogenize(A, eps, grid=GridSpec.uniform(1, len(eps), 4))
    assert r.Abar[0, 0] == c
    assert r.budget["total"] == eps[0]


@settings(max_examples=15)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=4), st.floats(-0.9, 0.9), st.sampled_from([0.05, 0.1]))
def test_maximum_principle_1d(fc, alpha, eps):
    f = lambda x: sum(c * (1 + np.cos(TWO_PI * (k + 1) * x)) for k, c in enumerate(fc))
    u = solve_fine_1d(lambda x: 1 + alpha * np.cos(TWO_PI * x / eps), f, finest_period=eps)
    assert u.u.min() >= -1e-14


@settings(max_examples=5)
@given(st.floats(0.0, 0.9), st.floats(0.1, 2.0))
def test_maximum_principle_2d(alpha, fmin):
    A = lambda X, Y: (1 + alpha * np.sin(TWO_PI * 4 * X) * np.cos(TWO_PI * 4 * Y))[None, None] * np.eye(2)[:, :, None, None]
    u = solve_fine_2d(A, lambda X, Y: fmin + X, 0.0, 64, finest_period=1 / 4)
    assert u.u.min() >= -1e-14


@given(st.floats(1.5, 40.0), st.floats(1e-4, 1e-1), st.floats(-3, 3))
def test_toy_scaling(beta, eps, c):
    base = toy_averaging(sin_modes(), sin_modes(), eps, beta)
    scaled = toy_averaging(sin_modes(amplitude=c), sin_modes(), eps, beta)
    assert base >= 0
    assert math.isclose(scaled, abs(c) * base, rel_tol=1e-12, abs_tol=1e-300)
