import math

import numpy as np
import pytest

from coxbound.designs import (
    TABLE1_IB,
    TABLE1_PL,
    CaseCohortSpec,
    StratifiedSpec,
    allocate_stratified,
    case_cohort_model,
    nonfailure_strata_probs,
    run_sweep,
    sp_asymptotic_variance,
    stratified_allocated,
    stratified_model,
    table1,
)
from coxbound.model_core import ModelError, build_observed_tables, make_grid
from coxbound.score_solver import compute_bound, fulldata_information, solve
from oracles import sp_variance_quadrature, sp_variance_theta0

LN2 = math.log(2)


class TestSpecs:
    def test_case_cohort_mass(self, cc):
        _, _, tables, _ = cc
        assert tables.total_mass == pytest.approx(1.0, abs=1e-10)

    def test_case_cohort_design(self, cc):
        _, design, _, _ = cc
        assert design.pi(0.3, 1) == 1.0 and design.pi(1.0, 0) == 0.1

    @pytest.mark.parametrize("bad", [dict(p0=0.0), dict(p0=1.0), dict(pi0=0.0), dict(h1=1.0),
                                     dict(theta=math.inf)])
    def test_case_cohort_invalid(self, bad):
        args = dict(p0=0.1, theta=0.0, pi0=0.5) | bad
        with pytest.raises(ModelError):
            CaseCohortSpec(**args)

    def test_stratified_pmf(self):
        spec = StratifiedSpec(LN2, 0.9, 0.3, 0.2, 0.1, 0.2, p0=0.1)
        h = spec.pmf()
        assert sum(h.values()) == pytest.approx(1.0, abs=1e-15)
        # sensitivity P(V=1 | X=1) = 1 - alpha, specificity P(V=0 | X=0) = 1 - beta
        assert h[(1, 1)] / (h[(1, 0)] + h[(1, 1)]) == pytest.approx(0.7, rel=1e-14)
        assert h[(0, 0)] / (h[(0, 0)] + h[(0, 1)]) == pytest.approx(0.8, rel=1e-14)

    def test_stratified_model_shape(self):
        model, design = stratified_model(StratifiedSpec(LN2, 0.9, 0.3, 0.2, 0.1, 0.2, p0=0.1))
        assert model.coefficient_scope == "x"
        assert design.pi(0.4, 0, (1.0,)) == 0.2 and design.pi(0.4, 1, (0.0,)) == 1.0

    def test_perfect_surrogate_drops_levels(self):
        model, _ = stratified_model(StratifiedSpec(LN2, 0.9, 0.0, 0.0, 0.1, 0.2, p0=0.1))
        assert model.n_levels == 2

    def test_exactly_one_rate(self):
        with pytest.raises(ModelError):
            StratifiedSpec(LN2, 0.9, 0.3, 0.2, 0.1, 0.2)

    def test_uninformative_surrogate_matches_classical(self):
        # alpha = beta = 0.5 and pi0 = pi1: V carries no information
        strat = StratifiedSpec(LN2, 0.9, 0.5, 0.5, 0.1, 0.1, p0=0.1)
        classic = CaseCohortSpec(0.1, LN2, 0.1, h1=0.1)
        a = solve(*stratified_model(strat), 200).I_star[0, 0]
        b = solve(*case_cohort_model(classic), 200).I_star[0, 0]
        assert a == pytest.approx(b, rel=1e-10)


class TestAllocation:
    def test_proportional(self):
        np.testing.assert_array_equal(allocate_stratified(0.1, [0.3, 0.6], "proportional"), [0.1, 0.1])

    def test_equal_counts(self):
        spec = StratifiedSpec(LN2, 0.9, 0.3, 0.1, 1.0, 1.0, p0=0.1)
        q, _ = nonfailure_strata_probs(spec)
        pi = allocate_stratified(0.1, q, "equal-expected-counts")
        assert pi[0] * q[0] == pytest.approx(pi[1] * q[1], abs=1e-12)
        assert np.dot(pi, q) == pytest.approx(0.1 * q.sum(), rel=1e-14)

    def test_cap_and_redistribute(self):
        pi = allocate_stratified(0.5, [0.9, 0.1], "equal-expected-counts")
        assert pi[1] == 1.0
        assert np.dot(pi, [0.9, 0.1]) == pytest.approx(0.5, rel=1e-14)

    def test_single_stratum(self):
        assert allocate_stratified(0.2, [0.7, 0.0], "equal-expected-counts")[0] == pytest.approx(0.2)
        assert allocate_stratified(0.2, [0.7], "proportional")[0] == 0.2

    def test_expected_cases(self):
        pi = allocate_stratified(None, [0.5, 0.4], "subcohort-equals-expected-cases", case_prob=0.09)
        assert np.dot(pi, [0.5, 0.4]) == pytest.approx(0.09, rel=1e-14)

    @pytest.mark.parametrize("total,rule", [(1.5, "proportional"), (0.1, "neyman"), (None, "proportional")])
    def test_invalid(self, total, rule):
        with pytest.raises(ModelError):
            allocate_stratified(total, [0.5, 0.4], rule)


class TestSPVariance:
    def test_full_cohort(self):
        spec = CaseCohortSpec(0.1, LN2, 1.0)
        model, _ = case_cohort_model(spec)
        tables = build_observed_tables(model, make_grid(model, 400), 8)
        I = fulldata_information(tables, exact=True)[0, 0]
        assert sp_asymptotic_variance(spec) == pytest.approx(1 / I, rel=1e-12)

    @pytest.mark.parametrize("p0,pi0", [(0.01, 0.1), (0.3, 0.5)])
    def test_theta_zero_closed_form(self, p0, pi0):
        got = sp_asymptotic_variance(CaseCohortSpec(p0, 0.0, pi0))
        assert got == pytest.approx(sp_variance_theta0(p0, pi0), rel=1e-10)

    @pytest.mark.parametrize("p0,theta", [(0.1, LN2), (0.5, -1.0)])
    def test_quadrature_oracle(self, p0, theta):
        got = sp_asymptotic_variance(CaseCohortSpec(p0, theta, 0.2, h1=0.3))
        assert got == pytest.approx(sp_variance_quadrature(p0, theta, 0.2, h1=0.3), rel=1e-8)

    def test_not_below_bound(self):
        for p0 in (0.01, 0.3):
            for pi0 in (0.05, 0.5):
                spec = CaseCohortSpec(p0, LN2, pi0)
                I = compute_bound(*case_cohort_model(spec), n=200).I_star[0, 0]
                assert sp_asymptotic_variance(spec) * I >= 1 - 1e-9


class TestSweep:
    def test_rows_in_order_with_endpoint(self):
        pts = [dict(p0=0.1, theta=LN2, pi0=p) for p in (1.0, 0.1, 0.5)]
        rep = run_sweep("case_cohort", pts, n=100, with_sp=True)
        assert [r.params["pi0"] for r in rep.rows] == [1.0, 0.1, 0.5]
        top = rep.rows[0]
        assert top.are_ib == pytest.approx(1.0, abs=1e-6)
        assert top.sp_ratio == pytest.approx(1.0, abs=1e-6)
        assert all(r.sp_ratio >= 1 - 1e-9 for r in rep.rows)
        assert rep.columns[:3] == ["p0", "theta", "pi0"]

    def test_are_monotone_in_pi0(self):
        pts = [dict(p0=0.2, theta=LN2, pi0=p) for p in (0.05, 0.1, 0.2, 0.4, 0.7, 1.0)]
        are = [r.are_ib for r in run_sweep("case_cohort", pts, n=100).rows]
        assert all(b >= a for a, b in zip(are, are[1:]))

    def test_failures_recorded(self):
        rep = run_sweep("case_cohort", [dict(p0=1.5, theta=0.0, pi0=0.1),
                                        dict(p0=0.1, theta=0.0, pi0=0.1)], n=50)
        assert rep.rows[0].error and not rep.rows[0].converged
        assert not rep.rows[1].error
        assert not rep.all_failed

    def test_threads_do_not_change_results(self):
        pts = [dict(p0=0.1, theta=LN2, pi0=p) for p in (0.1, 0.3)]
        a = run_sweep("case_cohort", pts, n=50, threads=1)
        b = run_sweep("case_cohort", pts, n=50, threads=2)
        assert [r.I_star for r in a.rows] == [r.I_star for r in b.rows]

    def test_stratified_rule_points(self):
        rep = run_sweep("stratified", [dict(theta=LN2, p_x0=0.9, alpha=0.3, beta=0.1, p0=0.1,
                                            rule="equal-expected-counts", total=0.1)], n=60)
        assert 0 < rep.rows[0].are_ib < 1


@pytest.fixture(scope="module")
def rows():
    return table1(LN2, p_x1_values=(0.05,), n=100, refine=False)


class TestTable1:
    def test_layout(self, rows):
        assert len(rows) == 9
        assert [(r["sensitivity"], r["specificity"]) for r in rows[:3]] == [(0.5, 0.5), (0.5, 0.7), (0.5, 0.9)]

    def test_published_pl_passthrough(self, rows):
        assert rows[-1]["are_pl_pct"] == 60.5
        assert TABLE1_PL[0.5][2] == (58.4, 64.7, 75.8)
        assert TABLE1_IB[0.05][0][0] == 36.0 and TABLE1_IB[0.05][2][2] == 70.3

    def test_ratio_arithmetic(self, rows):
        for r in rows:
            assert abs(r["ratio_pct"] - 100 * r["are_pl_pct"] / r["are_ib_pct"]) < 0.05

    def test_uninformative_cell_is_classical(self, rows):
        r = rows[0]
        assert r["pi0"] == pytest.approx(r["pi1"], rel=1e-12)
        lam = r["lam"]
        classic = CaseCohortSpec(-math.expm1(-lam), LN2, r["pi0"], h1=0.05)
        ref = compute_bound(*case_cohort_model(classic), n=100, refine=False).are[0]
        assert r["are_ib_pct"] == pytest.approx(100 * ref, rel=1e-9)
