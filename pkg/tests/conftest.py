import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coxbound.designs import CaseCohortSpec, case_cohort_model  # noqa: E402
from coxbound.model_core import (  # noqa: E402
    CensoringSpec,
    CovariateLevel,
    FullDataModel,
    MissingnessDesign,
    PiecewiseHazard,
    build_observed_tables,
    design_tables,
    make_grid,
)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cc_spec():
    return CaseCohortSpec(p0=0.1, theta=math.log(2), pi0=0.1)


@pytest.fixture(scope="session")
def cc(cc_spec):
    """Case-cohort model, design, tables and design tables on 400 cells."""
    model, design = case_cohort_model(cc_spec)
    tables = build_observed_tables(model, make_grid(model, 400, design))
    return model, design, tables, design_tables(design, tables)


def general_model():
    """Four (x, v) levels, piecewise baseline, continuous censoring and an interior atom."""
    levels = [CovariateLevel((0.0,), (0.0,)), CovariateLevel((1.0,), (0.0,)),
              CovariateLevel((0.0,), (1.0,)), CovariateLevel((1.0,), (1.0,))]
    c_lo = CensoringSpec(((0.6, 0.25), (1.0, 1.0)), PiecewiseHazard.constant(0.3))
    c_hi = CensoringSpec(((0.6, 0.25), (1.0, 1.0)), PiecewiseHazard((0.0, 0.5), (0.5, 0.2)))
    return FullDataModel((0.5,), levels, (0.4, 0.1, 0.3, 0.2),
                         PiecewiseHazard((0.0, 0.4), (0.6, 1.1)), (c_lo, c_lo, c_hi, c_hi), 1.0,
                         coefficient_scope="x")


def general_design(phase1="YDV"):
    if phase1 == "DV":
        probs = np.array([[[0.3, 0.5], [0.9, 1.0]]])
        return MissingnessDesign(probs, (), ((0.0,), (1.0,)), "DV")
    # buckets (0, 0.5] and (0.5, 1]; axes (bucket, delta, v-group)
    probs = np.array([[[0.3, 0.5], [0.9, 1.0]], [[0.2, 0.6], [0.8, 1.0]]])
    return MissingnessDesign(probs, (0.5,), ((0.0,), (1.0,)), "YDV")


@pytest.fixture(scope="session")
def gen():
    model, design = general_model(), general_design()
    tables = build_observed_tables(model, make_grid(model, 120, design))
    return model, design, tables, design_tables(design, tables)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
