import math

import numpy as np
import pytest
from scipy import integrate

from conftest import general_design, general_model
from coxbound.designs import CaseCohortSpec, case_cohort_model
from coxbound.model_core import (
    CensoringSpec,
    CovariateLevel,
    FullDataModel,
    MissingnessDesign,
    ModelError,
    PiecewiseHazard,
    ScoreField,
    SupportError,
    TimeGrid,
    build_observed_tables,
    cond_mean_future,
    cond_mean_given_failure,
    cond_mean_phase1,
    design_tables,
    make_grid,
)


class TestPiecewiseHazard:
    def test_cumulative_matches_quadrature(self):
        hz = PiecewiseHazard((0.0, 0.3, 0.7), (0.5, 2.0, 0.1))
        for t in (0.1, 0.3, 0.55, 0.9, 2.0):
            ref, _ = integrate.quad(lambda s: float(hz.rate(s)), 0, t, points=[0.3, 0.7])
            assert hz.cumulative(t) == pytest.approx(ref, rel=1e-12)

    def test_inverse_round_trip(self):
        hz = PiecewiseHazard((0.0, 0.3, 0.7), (0.5, 2.0, 0.1))
        t = np.array([0.05, 0.3, 0.5, 0.8, 3.0])
        np.testing.assert_allclose(hz.inverse_cumulative(hz.cumulative(t)), t, rtol=1e-12)

    def test_inverse_never_reached(self):
        hz = PiecewiseHazard((0.0, 1.0), (1.0, 0.0))
        assert np.isinf(hz.inverse_cumulative(2.0))

    def test_rate_left_limit_at_knot(self):
        hz = PiecewiseHazard((0.0, 0.5), (1.0, 3.0))
        assert hz.rate(0.5) == 3.0
        assert hz.rate(0.5, left=True) == 1.0

    @pytest.mark.parametrize("knots,rates", [((0.1,), (1.0,)), ((0.0, 0.5), (1.0,)),
                                             ((0.0,), (-1.0,)), ((0.0, 0.5, 0.4), (1, 1, 1))])
    def test_invalid(self, knots, rates):
        with pytest.raises(ModelError):
            PiecewiseHazard(knots, rates)


class TestCensoring:
    def test_survivor_with_atoms(self):
        c = CensoringSpec(((0.4, 0.3), (1.0, 1.0)), PiecewiseHazard.constant(0.7))
        # P(C >= t) = exp(-0.7 t) times (1 - 0.3) once t passes 0.4
        for t, ref in ((0.2, math.exp(-0.14)), (0.4, math.exp(-0.28)),
                       (0.5, 0.7 * math.exp(-0.35)), (1.0, 0.7 * math.exp(-0.7))):
            assert c.surv_ge(t) == pytest.approx(ref, rel=1e-14)
        assert c.surv_gt(0.4) == pytest.approx(0.7 * math.exp(-0.28), rel=1e-14)
        assert c.surv_gt(1.0) == 0.0

    def test_bad_atom(self):
        with pytest.raises(ModelError):
            CensoringSpec(((0.5, 1.5),))


class TestFullDataModel:
    def test_needs_terminal_atom(self):
        with pytest.raises(ModelError):
            FullDataModel((0.0,), (CovariateLevel((0.0,)),), (1.0,), PiecewiseHazard.constant(1),
                          (CensoringSpec(((0.5, 1.0),)),), 1.0)

    def test_pmf_must_sum_to_one(self):
        c = CensoringSpec.administrative(1.0)
        with pytest.raises(ModelError):
            FullDataModel((0.0,), (CovariateLevel((0.0,)), CovariateLevel((1.0,))), (0.5, 0.6),
                          PiecewiseHazard.constant(1), (c, c), 1.0)

    def test_theta_dimension(self):
        c = CensoringSpec.administrative(1.0)
        with pytest.raises(ModelError):
            FullDataModel((0.0, 1.0), (CovariateLevel((0.0,)),), (1.0,),
                          PiecewiseHazard.constant(1), (c,), 1.0)

    def test_case_cohort_masses(self):
        # censored mass at level z is exp(-lam e^{theta z}) h(z); P(fail | Z=0) = p0
        spec = CaseCohortSpec(0.2, 0.7, 0.3, h1=0.4)
        model, _ = case_cohort_model(spec)
        for l, z in enumerate((0.0, 1.0)):
            at, am = model.censoring_atoms(l)
            assert am[-1] == pytest.approx(math.exp(-spec.lam * math.exp(spec.theta * z)), rel=1e-14)
        assert 1 - model.censoring_atoms(0)[1][-1] == pytest.approx(0.2, rel=1e-14)


class TestDesign:
    def test_right_closed_buckets(self):
        d = general_design()
        assert d.pi(0.5, 0, (0.0,)) == 0.3
        assert d.pi(0.5000001, 0, (0.0,)) == 0.2
        assert d.pi(0.7, 1, (1.0,)) == 1.0

    def test_floor(self):
        with pytest.raises(ModelError):
            MissingnessDesign.by_delta(1.0, 1e-9)

    def test_dv_cannot_depend_on_time(self):
        with pytest.raises(ModelError):
            MissingnessDesign(np.ones((2, 2, 1)), (0.5,), None, "DV")

    def test_unknown_group(self):
        with pytest.raises(ModelError):
            general_design().pi(0.1, 0, (3.0,))


class TestGrid:
    def test_breakpoints_become_nodes(self):
        model, design = general_model(), general_design()
        g = make_grid(model, 7, design)
        for t in (0.4, 0.5, 0.6, 1.0):
            assert t in g.nodes
        assert g.nodes[-1] == 1.0

    def test_refined_halves(self):
        g = TimeGrid(np.array([0.5, 1.0]), np.array([1.0]), 1.0)
        np.testing.assert_allclose(g.refined().nodes, [0.25, 0.5, 0.75, 1.0])

    def test_cell_of_right_closed(self):
        g = TimeGrid(np.array([0.5, 1.0]), np.array([1.0]), 1.0)
        np.testing.assert_array_equal(g.cell_of([0.5, 0.51, 1.0]), [0, 1, 1])

    def test_bad_nodes(self):
        with pytest.raises(ModelError):
            TimeGrid(np.array([0.5, 0.4, 1.0]), np.array([1.0]), 1.0)


class TestObservedTables:
    def test_total_mass(self, gen):
        _, _, tables, _ = gen
        assert tables.total_mass == pytest.approx(1.0, abs=1e-12)

    def test_failure_mass_per_level_matches_quadrature(self, gen):
        model, _, tables, _ = gen
        for l in range(model.n_levels):
            ref, _ = integrate.quad(lambda t: float(model.failure_density(t, l)), 0, 1,
                                    points=[0.4, 0.5, 0.6], limit=200)
            assert tables.m1[l].sum() == pytest.approx(ref * model.pmf[l], rel=1e-12)

    def test_atom_masses(self, gen):
        model, _, tables, _ = gen
        for l in range(model.n_levels):
            # P(C = 0.6, T > 0.6 | z) = 0.25 P(C >= 0.6) S_T(0.6)
            ref = 0.25 * model.censoring[l].surv_ge(0.6) * model.surv_T(0.6, l) * model.pmf[l]
            assert tables.ma[l, 0] == pytest.approx(ref, rel=1e-14)

    def test_breakpoint_not_node_rejected(self):
        model = general_model()
        with pytest.raises(ModelError):
            build_observed_tables(model, TimeGrid(np.array([0.6, 1.0]), np.array([0.6, 1.0]), 1.0))

    def test_design_bucket_not_node_rejected(self):
        model = general_model()
        tables = build_observed_tables(model, make_grid(model, 4))
        probs = np.ones((2, 2, 2))
        d = MissingnessDesign(probs, (0.33,), ((0.0,), (1.0,)))
        with pytest.raises(ModelError):
            design_tables(d, tables)


class TestConditionalMeans:
    def test_given_failure_at_nodes(self, cc):
        model, _, tables, _ = cc
        lam, th = model.baseline.rates[0], model.theta[0]
        t = tables.grid.nodes
        # E[Z | Y = t, Delta = 1] = h1 e^th S1 / (h0 S0 + h1 e^th S1), S_z = exp(-lam e^{th z} t)
        w1 = 0.5 * math.exp(th) * np.exp(-lam * math.exp(th) * t)
        w0 = 0.5 * np.exp(-lam * t)
        ref = w1 / (w0 + w1)
        got = cond_mean_given_failure(np.array([0.0, 1.0]), tables, at="nodes")
        np.testing.assert_allclose(got, ref, rtol=1e-13)

    def test_given_failure_strict(self):
        levels = (CovariateLevel((0.0,)),)
        c = CensoringSpec.administrative(1.0)
        model = FullDataModel((0.0,), levels, (1.0,), PiecewiseHazard((0.0, 0.5), (1.0, 0.0)),
                              (c,), 1.0)
        tables = build_observed_tables(model, make_grid(model, 4))
        with pytest.raises(SupportError):
            cond_mean_given_failure(np.array([1.0]), tables, strict=True)
        assert np.isnan(cond_mean_given_failure(np.array([1.0]), tables)[-1])

    def test_future_mean_matches_quadrature(self, gen):
        model, _, tables, _ = gen
        def g(t, d, l):
            return np.sin(3 * t) + d * (1 + l)
        y = np.array([0.13, 0.45, 0.6, 0.77])
        got = cond_mean_future(g, tables, at=y)
        for l in range(model.n_levels):
            for k, yk in enumerate(y):
                f1 = integrate.quad(lambda t: model.failure_density(t, l) * g(t, 1, l), yk, 1,
                                    points=[0.4, 0.5, 0.6], limit=200)[0]
                f0 = integrate.quad(lambda t: model.censoring_density(t, l) * g(t, 0, l), yk, 1,
                                    points=[0.4, 0.5, 0.6], limit=200)[0]
                at, am = model.censoring_atoms(l)
                fa = sum(m * g(a, 0, l) for a, m in zip(at, am) if a > yk)
                ref = (f1 + f0 + fa) / model.survivor(yk, l)
                assert got[l, k] == pytest.approx(ref, rel=1e-9)

    def test_phase1_mean_is_projection(self, gen, rng):
        model, _, tables, _ = gen
        b = ScoreField(rng.standard_normal(tables.m1.shape), rng.standard_normal(tables.m0.shape),
                       rng.standard_normal(tables.ma.shape))
        for ph in ("YDV", "DV"):
            e = cond_mean_phase1(b, tables, ph)
            ee = cond_mean_phase1(e, tables, ph)
            assert (ee - e).max_abs(tables) < 1e-13
            # residual orthogonal to any phase-1 function
            c = cond_mean_phase1(ScoreField(rng.standard_normal(tables.m1.shape),
                                            rng.standard_normal(tables.m0.shape),
                                            rng.standard_normal(tables.ma.shape)), tables, ph)
            assert abs(tables.inner(b - e, c)) < 1e-13


class TestScoreField:
    def test_arithmetic(self, gen):
        _, _, tables, _ = gen
        one = ScoreField.from_level_values(tables, np.ones(4))
        z = ScoreField.zeros(tables)
        assert (1 - one).max_abs() == 0.0
        assert ((one * 2) / 2 - one + z).max_abs() == 0.0
        assert (-one).fail.min() == -1.0
