import math

import numpy as np
import pytest
from scipy import integrate

from conftest import general_design, general_model
from coxbound.designs import CaseCohortSpec, case_cohort_model, stratified_allocated, stratified_model
from coxbound.model_core import MissingnessDesign, ModelError
from coxbound.operators import NuisanceDirection, apply_D, apply_Pi1, nuisance_score
from coxbound.score_solver import (
    NumericError,
    compute_bound,
    efficient_score,
    fulldata_information,
    phase1_posterior,
    solve,
)
from oracles import classical_fulldata_information_theta0, sieve_information

LN2 = math.log(2)


class TestSieveOracle:
    """Independent parametric-sieve information on the same cells."""

    def test_case_cohort(self):
        spec = CaseCohortSpec(0.1, LN2, 0.1)
        model, design = case_cohort_model(spec)
        errs = []
        for n in (20, 50):
            sol = solve(model, design, n)
            ref = sieve_information(spec.theta, [0, 1], [0, 0], [0.5, 0.5], spec.lam,
                                    {0: 0.1}, {0: 1.0}, sol.tables.grid.nodes)
            errs.append(abs(ref / sol.I_star[0, 0] - 1))
        # both discretisations converge to the same limit at second order
        assert errs[1] < 2e-6
        assert errs[0] / errs[1] > 4

    @pytest.mark.parametrize("phase1", ["YDV", "DV"])
    def test_stratified(self, phase1):
        spec = stratified_allocated(LN2, 0.9, 0.3, 0.1, total=0.1, p0=0.1)
        model, design = stratified_model(spec, phase1)
        sol = solve(model, design, 50)
        xs = [lv.x[0] for lv in model.levels]
        vs = [int(lv.v[0]) for lv in model.levels]
        ref = sieve_information(spec.theta, xs, vs, model.pmf, spec.rate,
                                {0: spec.pi0, 1: spec.pi1}, {0: 1.0, 1: 1.0},
                                sol.tables.grid.nodes, phase1=phase1)
        assert sol.I_star[0, 0] == pytest.approx(ref, rel=2e-6)


class TestFullSampling:
    def test_ustar_is_projected_covariate(self, cc):
        model, _, tables, _ = cc
        sol = solve(model, MissingnessDesign.full(), 400)
        Z = np.broadcast_to(model.covariates()[:, None, :], sol.u_star.shape)
        ref = np.where(tables.support[..., None], apply_Pi1(Z, tables), 0.0)
        np.testing.assert_allclose(sol.u_star, ref, atol=1e-13)
        assert sol.I_star[0, 0] == pytest.approx(sol.I_full[0, 0], rel=1e-13)

    def test_general_model(self):
        model = general_model()
        sol = solve(model, MissingnessDesign.full(), 100)
        assert sol.I_star[0, 0] == pytest.approx(sol.I_full[0, 0], rel=1e-12)


class TestFullDataInformation:
    def test_theta_zero_closed_form(self):
        spec = CaseCohortSpec(0.3, 0.0, 0.5, h1=0.3)
        model, design = case_cohort_model(spec)
        sol = solve(model, design, 50)
        ref = classical_fulldata_information_theta0(spec.lam, 0.3)
        assert fulldata_information(sol.tables, exact=True)[0, 0] == pytest.approx(ref, rel=1e-13)

    def test_exact_matches_quadrature(self, cc):
        model, _, tables, _ = cc
        lam, th = model.baseline.rates[0], model.theta[0]

        def integrand(t):
            w = [0.5 * lam * math.exp(th * z) * math.exp(-lam * math.exp(th * z) * t) for z in (0, 1)]
            e = w[1] / (w[0] + w[1])
            return w[0] * e ** 2 + w[1] * (1 - e) ** 2

        ref = integrate.quad(integrand, 0, 1, epsabs=1e-14)[0]
        assert fulldata_information(tables, exact=True)[0, 0] == pytest.approx(ref, rel=1e-12)

    def test_discrete_converges(self, cc):
        _, _, tables, _ = cc
        d = fulldata_information(tables)[0, 0]
        e = fulldata_information(tables, exact=True)[0, 0]
        assert abs(d / e - 1) < 1e-5


class TestRoutes:
    def test_routes_agree_case_cohort(self, cc):
        model, design, _, _ = cc
        a, b = solve(model, design, 200, "T"), solve(model, design, 200, "K")
        assert np.max(np.abs(a.u_star - b.u_star)) < 1e-10

    def test_routes_agree_general(self):
        model, design = general_model(), general_design()
        a, b = solve(model, design, 80, "T"), solve(model, design, 80, "K")
        assert np.max(np.abs(a.u_star - b.u_star)) < 1e-10
        assert a.residual < 1e-12

    def test_variants_agree_case_cohort(self, cc_spec):
        ydv = solve(*case_cohort_model(cc_spec, "YDV"), 200)
        dv = solve(*case_cohort_model(cc_spec, "DV"), 200)
        assert dv.I_star[0, 0] == pytest.approx(ydv.I_star[0, 0], rel=1e-12)

    def test_dv_loses_information_when_y_matters(self):
        # with continuous censoring, observing Y at phase 1 is informative
        model = general_model()
        dv_design = general_design("DV")
        ydv_design = MissingnessDesign(dv_design.probs, (), dv_design.v_values, "YDV")
        ydv = solve(model, ydv_design, 80)
        dv = solve(model, dv_design, 80)
        assert dv.I_star[0, 0] < ydv.I_star[0, 0]

    def test_unknown_route(self, cc):
        model, design, _, _ = cc
        with pytest.raises((ModelError, ValueError)):
            solve(model, design, 20, "X")


class TestEfficientScore:
    def _moments(self, sol):
        # E over the observed law on the quadrature mesh, pointwise evaluator
        tables, dt = sol.tables, sol.design_tables
        mean, second = 0.0, 0.0
        L = tables.n_levels
        for l in range(L):
            for delta, mass, pi in ((1, tables.m1[l], dt.pi1[l]), (0, tables.m0[l], dt.pi0[l])):
                y = tables.fine_t.ravel()
                m, p = mass.ravel(), pi.ravel()
                keep = m > 0
                y, m, p = y[keep], m[keep], p[keep]
                d = np.full(len(y), delta)
                lv = np.full(len(y), l)
                k1 = efficient_score(sol, y, d, lv, np.ones(len(y)))[:, 0]
                k0 = efficient_score(sol, y, d, lv, np.zeros(len(y)))[:, 0]
                mean += np.sum(m * (p * k1 + (1 - p) * k0))
                second += np.sum(m * (p * k1 ** 2 + (1 - p) * k0 ** 2))
            at = tables.grid.atom_times
            k1 = efficient_score(sol, at, np.zeros(len(at), int), np.full(len(at), l), np.ones(len(at)))[:, 0]
            k0 = efficient_score(sol, at, np.zeros(len(at), int), np.full(len(at), l), np.zeros(len(at)))[:, 0]
            mean += np.sum(tables.ma[l] * (dt.pia[l] * k1 + (1 - dt.pia[l]) * k0))
            second += np.sum(tables.ma[l] * (dt.pia[l] * k1 ** 2 + (1 - dt.pia[l]) * k0 ** 2))
        return mean, second

    @pytest.mark.parametrize("which", ["cc", "general"])
    def test_pointwise_matches_quadrature(self, which, cc):
        if which == "cc":
            sol = solve(cc[0], cc[1], 100)
        else:
            sol = solve(general_model(), general_design(), 60)
        mean, second = self._moments(sol)
        assert abs(mean) < 1e-12
        assert second == pytest.approx(sol.I_star[0, 0], rel=1e-10)

    def test_orthogonal_to_nuisance(self):
        from coxbound.model_core import cond_mean_phase1
        sol = solve(general_model(), general_design(), 60)
        tables, dt = sol.tables, sol.design_tables
        zeta = apply_D(sol.u_star[..., 0], tables)
        e = cond_mean_phase1(zeta, tables, dt.phase1)
        pi, odds = dt.as_field(), dt.odds_field()
        k1 = zeta / pi - odds * e
        for d, tol in ((NuisanceDirection("lambda", lambda t: np.ones_like(t)), 1e-12),
                       (NuisanceDirection("h", np.array([0.0, 1.0, 2.0, 5.0])), 1e-12),
                       (NuisanceDirection("lambdaG", lambda t, l: t * (l % 2)), 1e-12),
                       (NuisanceDirection("lambda", lambda t: np.sin(4 * t)), 1e-5)):
            a = nuisance_score(d, tables)
            ea = cond_mean_phase1(a, tables, dt.phase1)
            ip = tables.inner(k1 * pi, a) + tables.inner(e * (1 - pi), ea)
            norm = math.sqrt(sol.I_star[0, 0] * (tables.inner(a * pi, a) + tables.inner(ea * (1 - pi), ea)))
            assert abs(ip) / norm < tol, d

    def test_outside_support(self, cc):
        sol = solve(cc[0], cc[1], 20)
        with pytest.raises(ModelError):
            efficient_score(sol, np.array([1.5]), np.array([1]), np.array([0]), np.array([1]))

    def test_posterior_rows(self):
        model = general_model()
        p = phase1_posterior(model, np.array([0.2, 0.6, 1.0]), np.array([1, 0, 0]), np.array([0, 3, 2]))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-14)
        assert p[0, 2] == 0.0 and p[1, 0] == 0.0
        # Bayes by hand at y=0.2, delta=1, v=0
        w = [model.failure_density(0.2, l) * model.pmf[l] for l in (0, 1)]
        assert p[0, 0] == pytest.approx(w[0] / sum(w), rel=1e-14)


class TestNumerics:
    def test_condition_ceiling(self, cc):
        model, design, _, _ = cc
        with pytest.raises(NumericError):
            solve(model, design, 20, cond_ceiling=1.0)

    def test_refinement_trail(self, cc):
        model, design, _, _ = cc
        res = compute_bound(model, design, n=100)
        assert res.converged
        assert [n for n, _ in res.trail][:2] == [100, 200]

    def test_refinement_cap(self, cc):
        model, design, _, _ = cc
        res = compute_bound(model, design, n=100, rtol=1e-15, max_nodes=400)
        assert not res.converged
        assert res.trail[-1][0] == 400

    def test_are_in_unit_interval(self, cc):
        model, design, _, _ = cc
        are = compute_bound(model, design, n=100, refine=False).are[0]
        assert 0 < are < 1
