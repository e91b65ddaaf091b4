"""Cross-world cohort simulation from two frailty illness-death models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .domain import ProfileTable, ValidationError, observe_arrays
from .models import ArmModel, weibull_arm

# Weibull (shape, scale, coefficients) per arm and transition.
SCENARIOS = {
    "scenario-a": {
        0: {"01": (2.50, 2.50, (0.00, -0.69)), "02": (2.10, 2.25, (0.00, 0.69)), "12": (2.10, 2.75, (-0.69, 0.69))},
        1: {"01": (2.50, 2.00, (-1.39, 1.10)), "02": (2.10, 2.75, (-0.29, 0.41)), "12": (2.10, 2.25, (0.00, 0.00))},
    },
    "scenario-b": {
        0: {"01": (1.00, 0.10, (0.00, -0.69)), "02": (0.50, 1.00, (0.00, -0.69)), "12": (0.50, 1.00, (0.00, -0.69))},
        1: {"01": (1.00, 0.10, (0.00, 0.69)), "02": (3.00, 1.00, (0.00, 0.69)), "12": (3.00, 1.00, (0.00, 0.69))},
    },
}


def rho_max(theta0: float, theta1: float) -> float:
    """Largest correlation reachable by the shared-component construction."""
    if theta0 <= 0 or theta1 <= 0:
        return 0.0
    return min(math.sqrt(theta0 / theta1), math.sqrt(theta1 / theta0))


@dataclass(frozen=True)
class FrailtyConfig:
    """Bivariate Gamma frailty with unit means.

    ``theta = 0`` switches the corresponding frailty off (``gamma == 1``).
    """

    theta0: float
    theta1: float
    rho: float = 0.0

    def __post_init__(self):
        if self.theta0 < 0 or self.theta1 < 0:
            raise ValidationError("frailty variances must be non-negative")
        hi = rho_max(self.theta0, self.theta1)
        if not (0.0 <= self.rho <= hi + 1e-12):
            raise ValidationError(f"rho={self.rho} outside the admissible interval [0, {hi:.6g}]")

    @property
    def shared_shape(self) -> float:
        if self.rho == 0 or self.theta0 == 0 or self.theta1 == 0:
            return 0.0
        s = self.rho / math.sqrt(self.theta0 * self.theta1)
        # snap the boundary so 1/theta - s is exactly zero rather than -1e-17
        for th in (self.theta0, self.theta1):
            if abs(s - 1.0 / th) < 1e-12:
                s = 1.0 / th
        return s

    def theta(self, a: int) -> float:
        return self.theta0 if a == 0 else self.theta1


def _gamma(gen: np.random.Generator, shape: float, n: int) -> np.ndarray:
    if shape <= 0:
        return np.zeros(n)
    return gen.gamma(shape, 1.0, size=n)


def draw_shared_component(cfg: FrailtyConfig, n: int, gen: np.random.Generator) -> np.ndarray:
    """Draws of the common Gamma(shape s) component ``G_c``."""
    return _gamma(gen, cfg.shared_shape, n)


def frailty_from_components(cfg: FrailtyConfig, a: int, g_shared, g_own) -> np.ndarray:
    th = cfg.theta(a)
    if th == 0:
        return np.ones_like(np.asarray(g_shared, dtype=float))
    return th * (g_shared + g_own)


def draw_bivariate_gamma(cfg: FrailtyConfig, n: int, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` pairs ``(gamma0, gamma1)`` by trivariate reduction.

    ``gamma_a = theta_a * (G_c + G_a)`` with ``G_c ~ Gamma(s)``,
    ``G_a ~ Gamma(1/theta_a - s)`` and ``s = rho / sqrt(theta0 * theta1)``,
    giving unit means, variances ``theta_a`` and correlation ``rho``.
    ``seed`` may be an int or a :class:`numpy.random.Generator`.
    """
    gen = seed if isinstance(seed, np.random.Generator) else rngmod.stream(seed, "frailty")
    s = cfg.shared_shape
    gc = _gamma(gen, s, n)
    out = []
    for a in (0, 1):
        th = cfg.theta(a)
        own = _gamma(gen, 1.0 / th - s, n) if th > 0 else np.zeros(n)
        out.append(frailty_from_components(cfg, a, gc, own))
    return out[0], out[1]


def simulate_world(model: ArmModel, x, gamma, e01, e02, e12) -> tuple[np.ndarray, np.ndarray]:
    """Event times in one world by inverse transform of the cumulative hazards.

    ``e01, e02, e12`` are unit-exponential variates. Infection happens when
    the latent 0->1 time precedes the latent 0->2 time; death after infection
    follows the 1->2 hazard on the calendar clock, left-truncated at ``t1``.
    Returns ``(t1, t2)`` with ``t1 = inf`` when death comes first.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        s01 = gamma * model.t01.risk(x)
        s02 = gamma * model.t02.risk(x)
        s12 = gamma * model.t12.risk(x)
        lat01 = model.t01.baseline.inverse_cumhaz(np.asarray(e01) / s01)
        lat02 = model.t02.baseline.inverse_cumhaz(np.asarray(e02) / s02)
        infected = lat01 < lat02
        t1 = np.where(infected, lat01, np.inf)
        h_start = model.t12.baseline.cumhaz(np.where(infected, lat01, 0.0))
        after = model.t12.baseline.inverse_cumhaz(h_start + np.asarray(e12) / s12)
        after = np.maximum(after, np.where(infected, lat01, 0.0))
    t2 = np.where(infected, after, lat02)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    return t1, t2


@dataclass
class CohortSpec:
    """Everything needed to regenerate a cohort bit-for-bit.

    ``covariates``: ``"scenario"`` (``X = (Bernoulli(0.5), Uniform(0,1))``),
    ``"normal"`` (``p`` independent standard normals) or ``"none"``.
    ``treatment``: ``{"kind": "randomized", "p": 0.5}`` or
    ``{"kind": "logistic", "intercept": b0, "coef": [...]}``.
    ``censoring``: ``None`` or ``{"kind": "exponential", "rate": r}`` or
    ``{"kind": "uniform", "low": lo, "high": hi}``.
    """

    n: int
    arms: dict
    frailty: FrailtyConfig
    covariates: str = "scenario"
    p: int = 2
    treatment: dict = field(default_factory=lambda: {"kind": "randomized", "p": 0.5})
    censoring: Optional[dict] = None
    seed: int = 0
    common_randomness: bool = False

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValidationError("n must be >= 1")
        self.n = int(self.n)
        if self.covariates not in ("scenario", "normal", "none"):
            raise ValidationError(f"unknown covariate generator {self.covariates!r}")
        if self.covariates == "scenario":
            self.p = 2
        elif self.covariates == "none":
            self.p = 0
        for a in (0, 1):
            if self.arms[a].p != self.p:
                raise ValidationError(f"arm {a} coefficients have length {self.arms[a].p}, expected {self.p}")
        kind = self.treatment.get("kind")
        if kind == "randomized":
            if not 0 < float(self.treatment.get("p", 0.5)) < 1:
                raise ValidationError("randomization probability must lie in (0, 1)")
        elif kind == "logistic":
            if len(self.treatment.get("coef", [])) != self.p:
                raise ValidationError("logistic treatment coefficients must match covariate dimension")
        else:
            raise ValidationError(f"unknown treatment mechanism {kind!r}")
        if self.censoring is not None and self.censoring.get("kind") not in ("exponential", "uniform"):
            raise ValidationError(f"unknown censoring kind {self.censoring.get('kind')!r}")


def scenario_spec(name: str, n: int, theta: float, rho: float, seed: int = 0, **kw) -> CohortSpec:
    if name not in SCENARIOS:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    params = SCENARIOS[name]
    arms = {a: weibull_arm(params[a], theta) for a in (0, 1)}
    return CohortSpec(n=n, arms=arms, frailty=FrailtyConfig(theta, theta, rho), seed=seed, **kw)


@dataclass
class SimulatedCohort:
    profiles: ProfileTable
    x: np.ndarray
    treat: np.ndarray
    y1: np.ndarray
    d1: np.ndarray
    y2: np.ndarray
    d2: np.ndarray

    @property
    def n(self) -> int:
        return len(self.treat)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n)

    def arm(self, a: int) -> dict:
        m = self.treat == a
        return {"x": self.x[m], "y1": self.y1[m], "d1": self.d1[m], "y2": self.y2[m], "d2": self.d2[m]}


def _draw_covariates(spec: CohortSpec, gen, m: int) -> np.ndarray:
    if spec.covariates == "scenario":
        return np.column_stack([gen.binomial(1, 0.5, m).astype(float), gen.uniform(0.0, 1.0, m)])
    if spec.covariates == "normal":
        return gen.standard_normal((m, spec.p))
    return np.zeros((m, 0))


def _simulate_block(spec: CohortSpec, b: int, start: int, stop: int) -> dict:
    gen = rngmod.stream(spec.seed, "cohort", b)
    m = stop - start
    x = _draw_covariates(spec, gen, m)
    g0, g1 = draw_bivariate_gamma(spec.frailty, m, gen)
    gam = (g0, g1)
    e = gen.standard_exponential((2, 3, m))
    if spec.common_randomness:
        e[1] = e[0]
    worlds = [simulate_world(spec.arms[a], x, gam[a], *e[a]) for a in (0, 1)]
    tr = spec.treatment
    if tr["kind"] == "randomized":
        prob = np.full(m, float(tr.get("p", 0.5)))
    else:
        prob = 1.0 / (1.0 + np.exp(-(float(tr.get("intercept", 0.0)) + x @ np.asarray(tr["coef"], dtype=float))))
    treat = (gen.uniform(size=m) < prob).astype(np.int64)
    censor = None
    if spec.censoring is not None:
        c = spec.censoring
        if c["kind"] == "exponential":
            censor = gen.exponential(1.0 / float(c["rate"]), m)
        else:
            censor = gen.uniform(float(c["low"]), float(c["high"]), m)
    t1 = np.where(treat == 1, worlds[1][0], worlds[0][0])
    t2 = np.where(treat == 1, worlds[1][1], worlds[0][1])
    y1, d1, y2, d2 = observe_arrays(t1, t2, censor)
    return dict(
        x=x, g0=g0, g1=g1, t1_0=worlds[0][0], t2_0=worlds[0][1], t1_1=worlds[1][0], t2_1=worlds[1][1],
        treat=treat, y1=y1, d1=d1, y2=y2, d2=d2,
    )


def simulate_cohort(spec: CohortSpec, threads: int = 1) -> SimulatedCohort:
    """Simulate potential outcomes and observed data for ``spec.n`` subjects.

    Randomness for each block of :data:`scrfice.rng.BLOCK_SIZE` subjects is
    keyed by ``(seed, block index)``, so output does not depend on
    ``threads``.
    """
    parts = rngmod.map_ordered(
        lambda item: _simulate_block(spec, item[0], *item[1]),
        list(enumerate(rngmod.blocks(spec.n))),
        threads,
    )
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    profiles = ProfileTable(cat["t1_0"], cat["t2_0"], cat["t1_1"], cat["t2_1"], gamma0=cat["g0"], gamma1=cat["g1"])
    return SimulatedCohort(profiles, cat["x"], cat["treat"], cat["y1"], cat["d1"], cat["y2"], cat["d2"])
