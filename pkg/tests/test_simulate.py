import math

import numpy as np
import pytest

from scrfice.domain import ValidationError
from scrfice.models import constant_hazard_arm, weibull_arm
from scrfice.oracle import oracle_estimands
from scrfice.simulate import (SCENARIOS, CohortSpec, FrailtyConfig, draw_bivariate_gamma, rho_max, scenario_spec,
                              simulate_cohort, simulate_world)


@pytest.mark.parametrize("t0, t1, expected", [(1, 1, 1.0), (1, 4, 0.5), (3, 1, math.sqrt(1 / 3)), (0, 2, 0.0)])
def test_rho_max(t0, t1, expected):
    assert rho_max(t0, t1) == pytest.approx(expected)


def test_inadmissible_rho_names_interval():
    with pytest.raises(ValidationError, match=r"\[0, 0.5\]"):
        FrailtyConfig(1.0, 4.0, 0.8)


def test_bivariate_gamma_moments():
    g0, g1 = draw_bivariate_gamma(FrailtyConfig(1.0, 1.0, 0.5), 10**6, seed=3)
    assert np.corrcoef(g0, g1)[0, 1] == pytest.approx(0.5, abs=0.01)
    assert g0.mean() == pytest.approx(1.0, abs=0.01)
    assert g1.var() == pytest.approx(1.0, abs=0.03)


def test_unequal_variances():
    g0, g1 = draw_bivariate_gamma(FrailtyConfig(0.5, 2.0, 0.4), 10**6, seed=4)
    assert g0.var() == pytest.approx(0.5, rel=0.03)
    assert g1.var() == pytest.approx(2.0, rel=0.05)
    assert np.corrcoef(g0, g1)[0, 1] == pytest.approx(0.4, abs=0.01)


def test_full_correlation_is_pathwise_equal():
    g0, g1 = draw_bivariate_gamma(FrailtyConfig(2.0, 2.0, 1.0), 1000, seed=5)
    np.testing.assert_array_equal(g0, g1)


def test_zero_correlation_is_independent():
    g0, g1 = draw_bivariate_gamma(FrailtyConfig(1.0, 1.0, 0.0), 200_000, seed=6)
    assert abs(np.corrcoef(g0, g1)[0, 1]) < 0.01


def test_constant_hazard_infection_probability():
    # competing unit hazards: Pr(T1 <= 1) = (1 - e^-2) / 2
    arm = constant_hazard_arm(1.0, 1.0, 1.0)
    gen = np.random.default_rng(1)
    n = 400_000
    t1, t2 = simulate_world(arm, np.zeros((n, 1)), np.ones(n), *gen.standard_exponential((3, n)))
    assert np.mean(t1 <= 1) == pytest.approx(0.5 * (1 - math.exp(-2)), abs=0.003)
    assert np.all(t2[np.isfinite(t1)] >= t1[np.isfinite(t1)])


def test_zero_hazards_make_everyone_type_11():
    arm = constant_hazard_arm(0.0, 0.0, 0.0, p=2)
    spec = CohortSpec(n=500, arms={0: arm, 1: arm}, frailty=FrailtyConfig(1, 1, 0))
    c = simulate_cohort(spec)
    assert set(c.profiles.patient_types().tolist()) == {11}


def test_no_deaths_everyone_ios():
    arm = constant_hazard_arm(1.0, 0.0, 0.0, p=2)
    c = simulate_cohort(CohortSpec(n=1000, arms={0: arm, 1: arm}, frailty=FrailtyConfig(1, 1, 0), seed=2))
    rep = oracle_estimands(c.profiles, [0.5, 1.0])
    assert rep.pi_ios == pytest.approx(1.0, abs=1e-12)


def test_common_randomness_symmetric_worlds():
    arm = weibull_arm(SCENARIOS["scenario-a"][0], 2.0)
    spec = CohortSpec(n=3000, arms={0: arm, 1: arm}, frailty=FrailtyConfig(2, 2, 1.0), common_randomness=True)
    p = simulate_cohort(spec).profiles
    np.testing.assert_array_equal(p.t1_0, p.t1_1)
    np.testing.assert_array_equal(p.t2_0, p.t2_1)
    assert np.all(oracle_estimands(p, [0.5, 1.0]).curve("fice") == 0)


def test_thread_independence():
    spec = scenario_spec("scenario-a", 150_000, 3.0, 0.5, seed=7)
    a, b = simulate_cohort(spec, threads=1), simulate_cohort(spec, threads=4)
    for name in ("t1_0", "t2_0", "t1_1", "t2_1"):
        np.testing.assert_array_equal(getattr(a.profiles, name), getattr(b.profiles, name))
    np.testing.assert_array_equal(a.y1, b.y1)


def test_scenario_a_event_rates():
    c = simulate_cohort(scenario_spec("scenario-a", 200_000, 1.0, 0.0, seed=1))
    t1, t2 = c.profiles.world(0)
    # roughly 8% infected and 18% dead within a year in the reference arm
    assert 0.04 < np.mean(t1 <= 1) < 0.12
    assert 0.10 < np.mean(t2 <= 1) < 0.25


def test_censoring_and_logistic_assignment():
    spec = scenario_spec("scenario-a", 20_000, 1.0, 0.0, seed=3, censoring={"kind": "exponential", "rate": 0.5},
                         treatment={"kind": "logistic", "intercept": 0.0, "coef": [2.0, 0.0]})
    c = simulate_cohort(spec)
    assert c.treat[c.x[:, 0] == 1].mean() > 0.8 > 0.6 > c.treat[c.x[:, 0] == 0].mean()
    assert np.mean(c.y2 < 1) > np.mean(c.d2)


@pytest.mark.parametrize("kw", [dict(n=0), dict(covariates="mixed"), dict(treatment={"kind": "coin"}),
                                dict(censoring={"kind": "weibull"})])
def test_spec_validation(kw):
    arm = weibull_arm(SCENARIOS["scenario-a"][0], 1.0)
    base = dict(n=10, arms={0: arm, 1: arm}, frailty=FrailtyConfig(1, 1, 0))
    base.update(kw)
    with pytest.raises(ValidationError):
        CohortSpec(**base)


def test_unknown_scenario():
    with pytest.raises(ValidationError):
        scenario_spec("scenario-z", 10, 1.0, 0.0)
