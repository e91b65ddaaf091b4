import math
import warnings

import numpy as np
import pytest
from scipy import integrate, stats

from scrfice.models import StepBaseline
from scrfice.simulate import CohortSpec, FrailtyConfig, simulate_cohort
from scrfice.models import weibull_arm
from scrfice.survfit import (ArmData, ArmFit, CoxComponent, EMConvergenceError, FrailtyIllnessDeathFit,
                             StructuralError, compute_k, em_fit, fit_frailty_illness_death, marginal_loglik,
                             posterior_frailty_moments)
from scrfice.survfit.em import _Engine

RECOVERY = {"01": (1.0, 0.5, (0.5, -0.3)), "02": (1.0, 1 / 0.3, (0.3, 0.4)), "12": (1.0, 0.5, (-0.4, 0.2))}


def two_subjects():
    data = ArmData(np.array([[0.5], [-1.0]]), [0.3, 0.6], [1, 0], [0.7, 0.6], [1, 1])
    comps = {
        "01": CoxComponent("01", np.array([0.2]), StepBaseline(np.array([0.3]), np.array([0.4]))),
        "02": CoxComponent("02", np.array([-0.5]), StepBaseline(np.array([0.2, 0.6]), np.array([0.1, 0.3]))),
        "12": CoxComponent("12", np.array([0.1]), StepBaseline(np.array([0.7]), np.array([0.8]))),
    }
    return data, comps


def test_marginal_loglik_matches_quadrature():
    data, comps = two_subjects()
    theta = 0.8
    pdf = stats.gamma(a=1 / theta, scale=theta).pdf
    k1 = 0.4 * math.exp(0.1) + 0.1 * math.exp(-0.25) + 0.8 * math.exp(0.05)
    k2 = 0.4 * math.exp(-0.2) + 0.4 * math.exp(0.5)
    c1 = (0.4 * math.exp(0.1)) * (0.8 * math.exp(0.05))
    c2 = 0.3 * math.exp(0.5)

    def integral(c, d, k):
        f = lambda g: c * g ** d * math.exp(-g * k) * pdf(g)  # noqa: E731
        return sum(integrate.quad(f, a, b, epsabs=0, epsrel=1e-13)[0] for a, b in ((0, 1), (1, np.inf)))

    expected = math.log(integral(c1, 2, k1)) + math.log(integral(c2, 1, k2))
    np.testing.assert_allclose(compute_k(data, comps), [k1, k2], rtol=1e-14)
    assert marginal_loglik(data, comps, theta) == pytest.approx(expected, abs=1e-8)


def test_degenerate_frailty_gives_cox_full_likelihood():
    data, comps = two_subjects()
    k = compute_k(data, comps)
    cox = math.log(0.4 * math.exp(0.1) * 0.8 * math.exp(0.05)) + math.log(0.3 * math.exp(0.5)) - k.sum()
    assert marginal_loglik(data, comps, 0.0) == pytest.approx(cox, rel=1e-12)
    assert marginal_loglik(data, comps, 1e-9) == pytest.approx(cox, rel=1e-7)


def test_zero_jump_at_event_is_structural():
    data, comps = two_subjects()
    comps["12"] = CoxComponent("12", np.array([0.1]), StepBaseline(np.array([0.5]), np.array([0.8])))
    with pytest.raises(StructuralError):
        marginal_loglik(data, comps, 1.0)


def test_k_without_infection_has_no_12_term():
    data = ArmData(np.zeros((1, 1)), [0.5], [0], [0.5], [0])
    base = StepBaseline(np.array([0.1, 0.2]), np.array([0.1, 0.1]))
    comps = {jk: CoxComponent(jk, np.zeros(1), base) for jk in ("01", "02")}
    comps["12"] = CoxComponent("12", np.zeros(1), StepBaseline(np.array([0.3]), np.array([5.0])))
    assert compute_k(data, comps)[0] == pytest.approx(0.4)


def test_first_em_step_by_hand():
    # five subjects, no covariates: the first M-step is Nelson-Aalen on each transition
    data = ArmData(np.zeros((5, 0)), [0.2, 0.3, 0.4, 0.6, 1.0], [1, 0, 1, 0, 0], [0.5, 0.3, 1.0, 0.6, 1.0],
                   [1, 1, 0, 1, 0])
    eng = _Engine(data, [])
    betas, jumps = eng.m_step(np.zeros(5))
    np.testing.assert_allclose(jumps["01"], [1 / 5, 1 / 3])
    np.testing.assert_allclose(jumps["02"], [1 / 4, 1 / 2])
    np.testing.assert_allclose(jumps["12"], [1 / 2])
    k = eng.k(betas, {jk: np.log(v) for jk, v in jumps.items()})
    hand = np.array([0.2 + 0.5, 0.2 + 0.25, 0.2 + 1 / 3 + 0.25 + 0.5, 0.2 + 1 / 3 + 0.75, 0.2 + 1 / 3 + 0.75])
    np.testing.assert_allclose(k, hand, rtol=1e-14)
    mean, _ = posterior_frailty_moments(1.0, k, data.delta_prime)
    np.testing.assert_allclose(mean, (1 + data.delta_prime) / (1 + hand), rtol=1e-14)


def recovery_arm(theta, n, seed):
    arm = weibull_arm(RECOVERY, theta)
    c = simulate_cohort(CohortSpec(n=n, arms={0: arm, 1: arm}, frailty=FrailtyConfig(theta, theta, 0.0),
                                   covariates="normal", p=2, treatment={"kind": "randomized", "p": 0.999},
                                   seed=seed))
    return c.arm(1)


@pytest.fixture(scope="module")
def medium_fit():
    d = recovery_arm(1.0, 3000, 11)
    return d, em_fit(**d)


@pytest.mark.parametrize("accelerate, step", [(True, "ecme"), (False, "ecme"), (False, "em")])
def test_loglik_trace_is_monotone(accelerate, step):
    d = recovery_arm(1.0, 1500, 5)
    try:
        fit = em_fit(**d, accelerate=accelerate, theta_step=step, max_iter=60)
        trace = np.array(fit.loglik_trace)
    except EMConvergenceError as exc:
        trace = np.array(exc.last.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))


def test_fit_is_a_stationary_point(medium_fit):
    d, fit = medium_fit
    data = ArmData(**d)
    ll = marginal_loglik(data, fit.components, fit.theta)
    assert ll == pytest.approx(fit.loglik, rel=1e-10)
    for th in (fit.theta * 0.98, fit.theta * 1.02):
        assert marginal_loglik(data, fit.components, th) <= ll + 1e-6


def test_medium_sample_recovery(medium_fit):
    _, fit = medium_fit
    assert fit.theta == pytest.approx(1.0, abs=0.35)
    for jk, (_, _, beta) in RECOVERY.items():
        np.testing.assert_allclose(fit.components[jk].beta, beta, atol=0.25)


def test_serialisation_round_trip(medium_fit):
    _, fit = medium_fit
    again = ArmFit.from_dict(fit.to_dict())
    assert again.theta == fit.theta
    np.testing.assert_array_equal(again.components["12"].baseline.jumps, fit.components["12"].baseline.jumps)
    both = FrailtyIllnessDeathFit({0: fit, 1: again})
    assert FrailtyIllnessDeathFit.from_json(both.to_json()).theta1 == fit.theta


def test_no_frailty_data_gives_small_theta():
    fit = em_fit(**recovery_arm(0.0, 4000, 2))
    assert fit.theta < 0.1


def test_iteration_cap_raises_with_last_iterate():
    d = recovery_arm(1.0, 800, 3)
    with pytest.raises(EMConvergenceError) as info:
        em_fit(**d, max_iter=1)
    assert isinstance(info.value.last, ArmFit) and info.value.last.iterations == 1


def test_transition_without_events_is_pinned():
    d = recovery_arm(1.0, 500, 4)
    d["d2"] = np.where(d["d1"] == 1, 0, d["d2"])  # no deaths after infection
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        fit = em_fit(**d)
    assert fit.components["12"].pinned
    assert fit.components["12"].baseline.cumhaz(np.array([1.0]))[0] == 0
    assert any("no events" in str(m.message) for m in w)


def test_fixed_theta_is_respected():
    d = recovery_arm(1.0, 800, 6)
    assert em_fit(**d, theta_fixed=0.5).theta == 0.5


def test_both_arms_threads_agree():
    arm = weibull_arm(RECOVERY, 1.0)
    c = simulate_cohort(CohortSpec(n=1600, arms={0: arm, 1: arm}, frailty=FrailtyConfig(1, 1, 0),
                                   covariates="normal", p=2, seed=9))
    f1 = fit_frailty_illness_death(c.x, c.treat, c.y1, c.d1, c.y2, c.d2, threads=1)
    f2 = fit_frailty_illness_death(c.x, c.treat, c.y1, c.d1, c.y2, c.d2, threads=2)
    assert f1.to_json() == f2.to_json()


@pytest.mark.parametrize("bad", [dict(d1=[2]), dict(y1=[0.0]), dict(y1=[0.6], y2=[0.5]), dict(y1=[0.3], d1=[0])])
def test_arm_data_validation(bad):
    from scrfice.domain import ValidationError

    kw = dict(x=np.zeros((1, 1)), y1=[0.5], d1=[1], y2=[0.5], d2=[1])
    kw.update(bad)
    with pytest.raises(ValidationError):
        ArmData(**kw)
