import math

import numpy as np
import pytest
from scipy.integrate import dblquad, quad, tplquad

from homoscale.config import Config, SeparationConfig
from homoscale.corrector import build_corrector, choose_parameters
from homoscale.effective import effective_matrix
from homoscale.errors import ResolutionError, ValidationError
from homoscale.pipeline import error_budget, group_scales, homogenize, sin_modes, spectral_tail, toy_averaging
from homoscale.torus_field import AnalyticCoefficient, GridSpec, ScaleVector, TorusField, build_field

TWO_PI = 2 * np.pi


@pytest.fixture(scope="module")
def three_scale():
    return AnalyticCoefficient.isotropic(1, 3, 4.0, [
        (((1,), (0,), (0,)), 1.0, "sin"),
        (((0,), (1,), (0,)), 0.8, "cos"),
        (((0,), (0,), (1,)), 1.0, "sin"),
    ])


@pytest.fixture(scope="module")
def three_scale_harmonic():
    inv = tplquad(lambda z, y, x: 1 / (4 + np.sin(TWO_PI * x) + 0.8 * np.cos(TWO_PI * y) + np.sin(TWO_PI * z)),
                  0, 1, 0, 1, 0, 1, epsabs=1e-12)[0]
    return 1 / inv


class TestGrouping:
    def test_break_at_first_gap(self):
        g = group_scales((1e-1, 0.9e-1, 1e-5))
        assert g.m == 2
        assert g.groups == ((1,), (2, 3))
        assert g.break_gap == 1
        assert [c.ok for c in g.rejected] == [False, True]
        assert g.rejected[0].lhs == pytest.approx(0.09)
        assert g.branch == 1 and g.warnings

    def test_single_group(self):
        g = group_scales((1e-1, 1e-3, 1e-7))
        assert g.m == 3 and g.groups == ((1, 2, 3),)
        assert g.break_gap is None and all(c.ok for c in g.checks)
        assert g.warnings == ()

    def test_unseparated_pair(self):
        g = group_scales((0.1, 0.09))
        assert g.m == 1
        assert g.groups == ((1,), (2,))
        assert any("trivial" in w for w in g.warnings)

    def test_second_branch_witness(self):
        g = group_scales((1.0, 0.05, 0.002))
        assert g.m == 2 and g.branch == 2 and g.witness == 3
        ratio, bound = g.breakpoint
        assert ratio == pytest.approx(0.05)
        assert bound == pytest.approx(math.e * math.exp(-0.05 * 0.05 / 0.002))
        assert ratio <= bound

    def test_idempotent(self):
        eps = (1e-1, 0.9e-1, 1e-5)
        a, b = group_scales(eps), group_scales(eps)
        assert a == b
        assert group_scales(ScaleVector(eps)) == a

    def test_config_forms_agree(self):
        eps = (0.2, 0.01, 1e-4)
        sep = SeparationConfig(c_gap=0.2)
        assert group_scales(eps, sep) == group_scales(eps, Config(separation=sep))
        assert group_scales(eps, sep) == group_scales(eps, Config.from_dict({"separation": {"c_gap": 0.2}}))

    def test_near_threshold_logged(self):
        # eps_2 = 0.1 eps_1 exactly sits on the boundary of its check
        g = group_scales((1.0, 0.1))
        assert g.m == 2 and g.near_threshold() == [2]

    def test_needs_two_scales(self):
        with pytest.raises(ValidationError):
            group_scales((0.1,))

    def test_to_dict_round_trip(self):
        d = group_scales((1e-1, 0.9e-1, 1e-5)).to_dict()
        assert d["m"] == 2 and d["groups"] == [[1], [2, 3]]


class TestHomogenize:
    def test_constant(self):
        A = AnalyticCoefficient.isotropic(2, 2, 2.5)
        r = homogenize(A, (0.1, 0.01), grid=GridSpec.uniform(2, 2, 4))
        np.testing.assert_array_equal(r.Abar, 2.5 * np.eye(2))
        assert r.stage_kinds() == ["constant"]
        assert r.budget["total"] == 0.1

    def test_one_shot_equivalence(self, two_scale_field):
        sc = ScaleVector((1e-1, 1e-4))
        r = homogenize(two_scale_field, sc)
        cs = build_corrector(two_scale_field, sc, choose_parameters(sc, Config()))
        assert r.stage_kinds() == ["simultaneous"]
        assert abs(r.Abar[0, 0] - effective_matrix(two_scale_field, cs, sc)[0, 0]) <= 1e-10

    def test_reiteration_with_break(self, three_scale, three_scale_harmonic):
        r = homogenize(three_scale, (1e-1, 0.9e-1, 1e-5))
        assert r.stage_kinds() == ["simultaneous", "reiterated"]
        assert [s.scales for s in r.stages] == [(2, 3), (1,)]
        assert [s.remaining for s in r.stages] == [1, 0]
        assert abs(r.Abar[0, 0] - three_scale_harmonic) <= 1e-3

    def test_unseparated_pair_reiterates(self, two_scale_coef):
        r = homogenize(two_scale_coef, (0.1, 0.09))
        assert r.stage_kinds() == ["reiterated", "reiterated"]
        inv = dblquad(lambda z, y: 1 / (3 + np.sin(TWO_PI * y) + np.sin(TWO_PI * z)), 0, 1, 0, 1, epsabs=1e-13)[0]
        assert r.Abar[0, 0] == pytest.approx(1 / inv, rel=1e-10)
        assert r.warnings

    def test_budget_terms_positive(self, three_scale):
        r = homogenize(three_scale, (1e-1, 1e-2, 1e-3))
        assert r.budget["eps1"] > 0 and all(t > 0 for t in r.budget["exp_terms"])
        assert r.budget["total"] == pytest.approx(0.1 + max(r.budget["exp_terms"]))

    def test_stages_consume_monotonically(self, three_scale):
        r = homogenize(three_scale, (1e-1, 0.9e-1, 1e-5))
        remaining = [s.remaining for s in r.stages]
        assert remaining == sorted(remaining, reverse=True)
        consumed = [i for s in r.stages for i in s.scales]
        assert sorted(consumed) == [1, 2, 3]

    def test_report_save(self, tmp_path, three_scale):
        import json

        path = homogenize(three_scale, (1e-1, 0.9e-1, 1e-5)).save(tmp_path)
        data = json.loads(path.read_text())
        assert [s["kind"] for s in data["stages"]] == ["simultaneous", "reiterated"]
        assert data["config"]["separation"]["c_gap"] == 0.1

    def test_under_resolved_outer_grid(self):
        # a sharp outer profile on an 8-point outer grid puts energy next to Nyquist
        terms = [(((k,), (0,), (0,)), 0.3 / k, "cos") for k in (1, 2, 3)] + [(((0,), (1,), (0,)), 0.5, "sin"),
                                                                           (((0,), (0,), (1,)), 0.5, "sin")]
        A = AnalyticCoefficient.isotropic(1, 3, 2.0, terms)
        f = build_field(A, GridSpec(1, 3, (8, 16, 16)))
        with pytest.raises(ResolutionError):
            homogenize(f, (1e-1, 0.9e-1, 1e-5))

    def test_block_mismatch(self, two_scale_field):
        with pytest.raises(ValidationError):
            homogenize(two_scale_field, (0.1, 0.01, 0.001))


class TestBudget:
    def test_values(self):
        b = error_budget(ScaleVector((0.1, 0.01)), 0.5)
        assert b["total"] == pytest.approx(0.1 + math.exp(-5))

    def test_spectral_tail(self):
        g = GridSpec.uniform(1, 1, 16)
        y = g.coords()[0][0]
        smooth = TorusField(g, (2 + np.cos(TWO_PI * y))[None, None])
        rough = TorusField(g, (2 + np.cos(TWO_PI * 7 * y))[None, None])
        assert spectral_tail(smooth) <= 1e-28
        assert spectral_tail(rough) == pytest.approx(1.0)


class TestToy:
    def test_constant_f(self):
        eps = 1e-3 / 0.37
        rho = toy_averaging({0: 1.0}, sin_modes(), eps, 5.0)
        exact = abs(quad(lambda x: np.sin(TWO_PI * x / eps), 0, 1, limit=2000)[0])
        assert rho == pytest.approx(exact, abs=1e-12)
        assert rho <= eps / math.pi

    def test_constant_g(self):
        for beta in (2.5, 7.3, 11.0):
            rho = toy_averaging(sin_modes(), {0: 1.0}, 1e-3, beta)
            assert rho <= beta * 1e-3 / math.pi + 1e-15

    def test_quadrature_crosscheck(self):
        eps, beta = 1e-3, 7.5
        h = lambda x: np.sin(TWO_PI * x / (beta * eps)) * np.sin(TWO_PI * x / eps)
        edges = np.linspace(0, 1, 201)
        ref = sum(quad(h, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0] for a, b in zip(edges[:-1], edges[1:]))
        assert abs(toy_averaging(sin_modes(), sin_modes(), eps, beta) - abs(ref)) <= 1e-9

    def test_mean_product_subtracted(self):
        assert toy_averaging({0: 2.0}, {0: 3.0}, 1e-3, 4.0) == 0.0

    def test_rejects(self):
        with pytest.raises(ValidationError):
            toy_averaging(sin_modes(), sin_modes(), 1e-3, 1.0)
        with pytest.raises(ValidationError):
            toy_averaging(sin_modes(), sin_modes(), 0.0, 4.0)
