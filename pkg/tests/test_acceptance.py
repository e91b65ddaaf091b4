"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a verdict through :func:`acceptance_log.verdict`; the
terminal summary prints one PASS/FAIL line per criterion.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate, stats

from acceptance_log import verdict
from populations import GRID, random_functionals, random_population
from scrfice.bounds import (ObservedFunctionals, fice_bounds, fice_bounds_rr, numerators, pi_ios_bounds)
from scrfice.cli import DEFAULTS, main
from scrfice.curves import default_grid
from scrfice.design import fit_propensity, mahalanobis_match, pair_bootstrap, smd_table
from scrfice.models import weibull_arm
from scrfice.oracle import oracle_estimands, oracle_observed_functionals
from scrfice.sensitivity import sensitivity_analysis
from scrfice.simulate import SCENARIOS, CohortSpec, FrailtyConfig, scenario_spec, simulate_cohort
from scrfice.survfit import EMConvergenceError, em_fit, fit_frailty_illness_death
from scrfice.survfit.frailty import gamma_laplace_deriv, log_abs_laplace_deriv, posterior_frailty_moments

pytestmark = pytest.mark.slow

N_BIG = 1_000_000
GRID52 = default_grid(52)


def scenario_models(name, theta):
    return [weibull_arm(SCENARIOS[name][a], theta) for a in (0, 1)]


def covariate_rows(nodes=16):
    """Gauss-Legendre rows for ``X = (Bernoulli(0.5), Uniform(0, 1))``."""
    u, w = np.polynomial.legendre.leggauss(nodes)
    u, w = (u + 1) / 2, w / 4
    rows = np.array([[b, v] for b in (0.0, 1.0) for v in u])
    return rows, np.concatenate([w, w])


@pytest.fixture(scope="module")
def scenario_a_oracles():
    start = time.perf_counter()
    out = {}
    for theta in (1.0, 3.0):
        for rho in (0.0, 0.5, 1.0):
            c = simulate_cohort(scenario_spec("scenario-a", N_BIG, theta, rho, seed=101))
            out[theta, rho] = oracle_estimands(c.profiles, GRID52)
    return out, time.perf_counter() - start


def test_criterion_1_scenario_a_strata(scenario_a_oracles):
    reps, secs = scenario_a_oracles
    bad = []
    for (theta, rho), o in reps.items():
        gap = o.pi_ios - o.pi_as
        if not (0.002 <= o.pi_ai <= 0.025 and 0.70 <= o.pi_as <= 0.84 and 0.005 <= gap <= 0.05):
            bad.append(f"theta={theta} rho={rho}: ai={o.pi_ai:.4f} as={o.pi_as:.4f} ios-as={gap:.4f}")
    ai = [o.pi_ai for o in reps.values()]
    ps = [o.pi_as for o in reps.values()]
    detail = (f"pi_ai in [{min(ai):.4f}, {max(ai):.4f}], pi_as in [{min(ps):.4f}, {max(ps):.4f}], "
              f"{secs:.0f}s" + ("; " + "; ".join(bad) if bad else ""))
    verdict(1, not bad and secs < 120, detail)


def test_criterion_2_aice_terminal_zero(scenario_a_oracles):
    reps, _ = scenario_a_oracles
    oracle_ok = all(o.curve("aice")[-1] == 0.0 and o.defined("aice")[-1] for o in reps.values())
    rows, w = covariate_rows()
    worst = 0.0
    for theta in (1.0, 3.0):
        for rho in (0.0, 0.5, 1.0):
            rep = sensitivity_analysis(*scenario_models("scenario-a", theta), rho, rows, GRID52, weights=w,
                                       mc_draws=2000, seed=7)
            v, se = rep.curve("aice")[-1], rep.se("aice")[-1]
            worst = max(worst, abs(v) / se if se > 0 else (0.0 if v == 0 else math.inf))
    verdict(2, oracle_ok and worst <= 3, f"oracle AICE(r) exactly 0: {oracle_ok}; sensitivity max |AICE(r)|/SE = {worst:.3g}")


def test_criterion_3_scenario_b_divergence():
    start = time.perf_counter()
    c = simulate_cohort(scenario_spec("scenario-b", N_BIG, 1.0, 0.0, seed=202))
    o = oracle_estimands(c.profiles, GRID52)
    secs = time.perf_counter() - start
    sace = np.max(np.abs(o.curve("sace")))
    fice, aice = o.curve("fice").max(), o.curve("aice").max()
    ok = sace < 0.01 and fice > 0.02 and aice > 0.02 and secs < 120
    verdict(3, ok, f"max |SACE| = {sace:.4f} (needs < 0.01), max FICE = {fice:.4f}, max AICE = {aice:.4f}, {secs:.0f}s")


@pytest.fixture(scope="module")
def populations():
    """At least 1000 populations with a non-empty ios stratum per assumption."""
    rng = np.random.default_rng(4242)
    start = time.perf_counter()
    out = {}
    for assumption in ("iosORP", "weakORP", "none"):
        pops = []
        while len(pops) < 1000:
            pop = random_population(rng, assumption)
            truth = oracle_estimands(pop, GRID)
            if truth.pi_ios > 0:
                pops.append((truth, oracle_observed_functionals(pop, GRID)))
        out[assumption] = pops
    return out, time.perf_counter() - start


def test_criterion_4_bound_containment(populations):
    pops, gen_secs = populations
    start = time.perf_counter()
    violations = checked = 0
    for assumption, items in pops.items():
        for truth, func in items:
            lo, up, ok = fice_bounds(func, assumption)
            v = truth.curve("fice")
            checked += v.size
            violations += int(np.sum(~ok | (lo > v + 1e-12) | (v > up + 1e-12)))
    secs = gen_secs + time.perf_counter() - start
    sizes = ", ".join(f"{a} {len(v)}" for a, v in pops.items())
    verdict(4, violations == 0 and secs < 60,
            f"{violations} violations over {checked} grid points ({sizes} populations), {secs:.0f}s")


def test_criterion_5_width_identity(populations):
    pops, _ = populations
    worst, hits = 0.0, 0
    for truth, func in pops["iosORP"]:
        p = truth.pi_ios
        if p <= 0.5:
            continue
        lo, up, _ = fice_bounds(func, "iosORP")
        f1 = func.ef1[1]
        cond = (1 - p < f1) & (f1 < p)
        hits += int(cond.sum())
        if cond.any():
            worst = max(worst, float(np.max(np.abs((up - lo)[cond] - (1 / p - 1)))))
    verdict(5, hits > 0 and worst <= 1e-12, f"max deviation {worst:.2e} over {hits} grid points")


def test_criterion_6_analytic_orderings():
    rng = np.random.default_rng(66)
    bad = []
    for i in range(10_000):
        f = random_functionals(rng, g=int(rng.integers(1, 8)))
        lo_w, up_w = numerators(f, "weakORP")
        lo_n, up_n = numerators(f, "none")
        p_ios = pi_ios_bounds(f, "iosORP")[1]
        p_w, p_n = pi_ios_bounds(f, "weakORP")[1], pi_ios_bounds(f, "none")[1]
        rr_i, rr_w = fice_bounds_rr(f, "iosORP"), fice_bounds_rr(f, "weakORP")
        same_rr = all(np.array_equal(a, b, equal_nan=True) for a, b in zip(rr_i, rr_w))
        ok = (np.all(up_w <= up_n) and np.all(lo_w <= lo_n) and p_n <= p_w <= p_ios and same_rr
              and (f.epsi[0] > f.epsi[1] or p_w == p_n))
        if not ok:
            bad.append(i)
    verdict(6, not bad, f"{len(bad)} violations over 10000 functional sets")


def test_criterion_7_worked_numbers():
    f = ObservedFunctionals.from_scalars(0.815, 0.876, 0.073, 0.1, eboth0=0.027)
    ios = pi_ios_bounds(f, "iosORP")
    weak = pi_ios_bounds(f, "weakORP")
    got = [round(v, 3) for v in (*ios, *weak)]
    verdict(7, got == [0.815, 0.815, 0.691, 0.815], f"iosORP {ios[1]:.4f}, weakORP [{weak[0]:.4f}, {weak[1]:.4f}]")


RECOVERY = {"01": (1.0, 0.5, (0.5, -0.3)), "02": (1.0, 1 / 0.3, (0.3, 0.4)), "12": (1.0, 0.5, (-0.4, 0.2))}


def recovery_cohort(theta, seed, n=40_000):
    arm = weibull_arm(RECOVERY, theta)
    return simulate_cohort(CohortSpec(n=n, arms={0: arm, 1: arm}, frailty=FrailtyConfig(theta, theta, 0.0),
                                      covariates="normal", p=2, seed=seed))


def test_criterion_8_em_recovery():
    start = time.perf_counter()
    passes = {}
    for theta in (1.0, 0.0):
        passes[theta] = 0
        for seed in range(10):
            c = recovery_cohort(theta, 800 + seed)
            fit = fit_frailty_illness_death(c.x, c.treat, c.y1, c.d1, c.y2, c.d2, threads=2)
            ok = True
            for arm in fit.arms.values():
                beta_err = max(np.max(np.abs(arm.components[jk].beta - np.array(b))) for jk, (_, _, b) in RECOVERY.items())
                tol = 0.05 if theta == 0 else 0.15 * theta
                ok &= beta_err <= 0.12 and abs(arm.theta - theta) <= tol
            passes[theta] += ok
    secs = time.perf_counter() - start
    verdict(8, min(passes.values()) >= 9 and secs < 600,
            f"passes theta=1 {passes[1.0]}/10, theta=0 {passes[0.0]}/10, {secs:.0f}s")


def _moment(theta, k, q, fn=lambda g: 1.0):
    pdf = stats.gamma(a=1 / theta, scale=theta).pdf
    f = lambda g: g ** q * math.exp(-k * g) * fn(g) * pdf(g)  # noqa: E731
    return sum(integrate.quad(f, a, b, epsabs=1e-15, epsrel=1e-12, limit=200)[0] for a, b in ((0, 1), (1, np.inf)))


def test_criterion_9_em_internals():
    drops = 0
    for seed in range(4):
        c = recovery_cohort(1.0, 900 + seed, n=3000)
        for accelerate, step in ((True, "ecme"), (False, "ecme"), (False, "em")):
            try:
                trace = np.array(em_fit(**c.arm(seed % 2), accelerate=accelerate, theta_step=step,
                                        max_iter=80).loglik_trace)
            except EMConvergenceError as exc:
                trace = np.array(exc.last.loglik_trace)
            drops += int(np.sum(np.diff(trace) < -1e-8 * np.abs(trace[1:])))
    quad_err = 0.0
    for theta in (0.3, 1.0, 2.5):
        for k in (0.1, 0.8, 3.0):
            for dp in (0, 1, 2):
                norm = _moment(theta, k, dp)
                m, lm = posterior_frailty_moments(theta, k, dp)
                quad_err = max(quad_err,
                               abs(gamma_laplace_deriv(theta, k, dp) / ((-1) ** dp * norm) - 1),
                               abs(m / (_moment(theta, k, dp, lambda g: g) / norm) - 1),
                               abs(lm - _moment(theta, k, dp, math.log) / norm) / max(abs(lm), 1.0))
    fd_err = 0.0
    for theta in (0.05, 0.5, 1.0, 4.0):
        for k in (0.01, 0.5, 2.0, 8.0):
            for q in (1, 2, 3):
                h = 1e-5 * k
                fd = (gamma_laplace_deriv(theta, k + h, q - 1) - gamma_laplace_deriv(theta, k - h, q - 1)) / (2 * h)
                fd_err = max(fd_err, abs(fd / gamma_laplace_deriv(theta, k, q) - 1))
                assert np.isfinite(log_abs_laplace_deriv(theta, k, q))
    ok = drops == 0 and quad_err <= 1e-8 and fd_err <= 1e-6
    verdict(9, ok, f"{drops} likelihood decreases, closed form vs quadrature {quad_err:.1e}, "
                   f"finite differences {fd_err:.1e}")


def test_criterion_10_identification_matches_oracle():
    start = time.perf_counter()
    rows, w = covariate_rows()
    models = scenario_models("scenario-a", 3.0)
    gaps = {"fice": 0.0, "sace": 0.0, "total": 0.0}
    worst_z = 0.0
    for rho in (0.0, 0.5, 1.0):
        c = simulate_cohort(scenario_spec("scenario-a", N_BIG, 3.0, rho, seed=303))
        truth = oracle_estimands(c.profiles, GRID52)
        rep = sensitivity_analysis(*models, rho, rows, GRID52, weights=w, mc_draws=10_000, seed=11,
                                   design="crossed")
        for est in gaps:
            gaps[est] = max(gaps[est], float(np.max(np.abs(rep.curve(est) - truth.curve(est)))))
        p = truth.pt_probs
        se = np.sqrt(rep.pt_se ** 2 + p * (1 - p) / N_BIG)
        diff = np.abs(rep.pt_probs - p)
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 1e-12, np.inf, 0.0))
        worst_z = max(worst_z, float(z.max()))
    secs = time.perf_counter() - start
    ok = max(gaps.values()) < 0.01 and worst_z <= 3 and secs < 600
    verdict(10, ok, ", ".join(f"sup gap {k} {v:.4f}" for k, v in gaps.items())
            + f", pt_probs max |z| {worst_z:.2f}, {secs:.0f}s")


def test_criterion_11_design_pipeline():
    rng = np.random.default_rng(1111)
    n = 4000
    x = np.column_stack([rng.standard_normal(n), rng.binomial(1, 0.4, n), rng.uniform(size=n)])
    a = (rng.uniform(size=n) < 1 / (1 + np.exp(-(0.9 + 0.5 * (x[:, 0] - x[:, 1] + x[:, 2]))))).astype(int)
    m = mahalanobis_match(x, a, fit_propensity(x, a), caliper_sd=DEFAULTS["analyze"]["caliper"])
    tab = smd_table(x, a, m)
    before, after = np.max(np.abs(tab.before)), np.max(np.abs(tab.after))
    ratios = []
    for k in range(30):
        v = np.random.default_rng(5000 + k).standard_normal(300)
        res = pair_bootstrap(300, lambda idx: v[idx].mean(), B=DEFAULTS["analyze"]["B"], seed=k)
        ratios.append(res.se / (v.std(ddof=1) / np.sqrt(300)))
    defaults = DEFAULTS["analyze"]["caliper"] == 0.3 and DEFAULTS["analyze"]["B"] == 200
    ok = before > 0.3 and after < 0.1 and abs(np.mean(ratios) - 1) < 0.15 and defaults
    verdict(11, ok, f"max SMD {before:.3f} -> {after:.3f}, mean bootstrap SE ratio {np.mean(ratios):.3f}, "
                    f"CLI defaults caliper 0.3 and B 200: {defaults}")


SPEC = """
arms:
  0: {"01": [1.0, 2.0, [0.3, -0.2]], "02": [1.0, 3.0, [0.2, 0.1]], "12": [1.0, 1.5, [-0.2, 0.2]]}
  1: {"01": [1.0, 1.6, [0.1, -0.3]], "02": [1.0, 3.5, [0.2, 0.0]], "12": [1.0, 1.5, [0.0, 0.3]]}
theta: 1.0
rho: 0.5
covariates: normal
p: 2
treatment: {kind: logistic, intercept: 0.0, coef: [0.6, -0.4]}
censoring: {kind: uniform, low: 0.5, high: 3.0}
"""


def _outputs(d):
    return {f.name: f.read_bytes() for f in sorted(d.iterdir()) if f.is_file()}


def test_criterion_12_determinism(tmp_path):
    (tmp_path / "spec.yaml").write_text(SPEC)
    runs = {
        "simulate": ["simulate", "--spec", str(tmp_path / "spec.yaml"), "--n", "1200", "--seed", "5"],
        "simulate-scenario": ["simulate", "--scenario", "scenario-a", "--theta", "3", "--rho", "0.5",
                              "--n", "2000", "--seed", "9"],
    }
    differing = []
    for name, args in runs.items():
        outs = []
        for k, threads in enumerate(("1", "1", "4")):
            d = tmp_path / f"{name}-{k}"
            assert main(args + ["--out", str(d), "--threads", threads]) == 0
            outs.append(_outputs(d))
        if not (outs[0] == outs[1] == outs[2]):
            differing.append(name)
    observed = tmp_path / "simulate-0" / "observed.csv"
    analyze = ["analyze", "--input", str(observed), "--grid", "5", "--mc-draws", "200", "--B", "6",
               "--fast-bootstrap", "--rho", "0,0.5", "--seed", "3"]
    oracle = ["oracle", "--input", str(tmp_path / "simulate-0" / "potential_outcomes.csv"), "--grid", "10"]
    for name, args in (("analyze", analyze), ("oracle", oracle)):
        outs = []
        for k, threads in enumerate(("1", "1", "3")):
            d = tmp_path / f"{name}-{k}"
            assert main(args + ["--out", str(d), "--threads", threads]) == 0
            outs.append(_outputs(d))
        if not (outs[0] == outs[1] == outs[2]):
            differing.append(name)
    verdict(12, not differing, "outputs byte-identical across reruns and thread counts" if not differing
            else f"outputs differ for {', '.join(differing)}")
