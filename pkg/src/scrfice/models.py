"""Baseline hazards and treatment-arm illness-death models.

An :class:`ArmModel` bundles the three transitions (01 infection, 02 death
without infection, 12 death after infection) of one treatment arm together
with the arm's Gamma frailty variance. The same object drives simulation
(Weibull baselines) and the identification integrals (Weibull at known
parameters, or Breslow step functions from a fit).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import ValidationError

TRANSITIONS = ("01", "02", "12")


@dataclass(frozen=True)
class WeibullBaseline:
    """``Lambda0(t) = (t / scale) ** shape``; ``scale=inf`` is the zero hazard."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValidationError("Weibull shape and scale must be positive")

    continuous = True

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        if np.isinf(self.scale):
            return np.zeros_like(t)
        with np.errstate(over="ignore"):
            return np.where(t > 0, (np.maximum(t, 0.0) / self.scale) ** self.shape, 0.0)

    def inverse_cumhaz(self, h):
        h = np.asarray(h, dtype=float)
        if np.isinf(self.scale):
            return np.full_like(h, np.inf)
        with np.errstate(over="ignore"):
            return self.scale * h ** (1.0 / self.shape)


@dataclass(frozen=True)
class StepBaseline:
    """Right-continuous step cumulative hazard with jumps at ``times``."""

    times: np.ndarray
    jumps: np.ndarray
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    continuous = False

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        jumps = np.asarray(self.jumps, dtype=float)
        if times.shape != jumps.shape or times.ndim != 1:
            raise ValidationError("times and jumps must be 1-d arrays of equal length")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("jump times must be strictly increasing")
        if np.any(jumps < 0):
            raise ValidationError("jumps must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "jumps", jumps)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(jumps)]))

    @classmethod
    def zero(cls) -> "StepBaseline":
        return cls(np.empty(0), np.empty(0))

    def cumhaz(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return self._cum[idx]

    def jump_at(self, t):
        """Jump size at ``t`` (0 where ``t`` is not a jump time)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        safe = np.minimum(idx, max(len(self.times) - 1, 0))
        if len(self.times) == 0:
            return np.zeros_like(t)
        hit = (idx < len(self.times)) & (self.times[safe] == t)
        return np.where(hit, self.jumps[safe], 0.0)


@dataclass(frozen=True)
class Transition:
    baseline: object
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    def risk(self, x) -> np.ndarray:
        """``exp(x @ beta)`` for a covariate row or matrix."""
        x = np.asarray(x, dtype=float)
        return np.exp(x @ self.beta)


@dataclass(frozen=True)
class ArmModel:
    """Three-transition frailty illness-death model for one arm."""

    t01: Transition
    t02: Transition
    t12: Transition
    theta: float

    def __post_init__(self):
        if self.theta < 0:
            raise ValidationError("frailty variance must be non-negative")
        dims = {len(self.t01.beta), len(self.t02.beta), len(self.t12.beta)}
        if len(dims) != 1:
            raise ValidationError("all transitions need coefficient vectors of one length")

    @property
    def p(self) -> int:
        return len(self.t01.beta)

    def transitions(self):
        return {"01": self.t01, "02": self.t02, "12": self.t12}

    @property
    def continuous(self) -> bool:
        return any(getattr(t.baseline, "continuous", False) for t in self.transitions().values())


def weibull_arm(params: dict, theta: float) -> ArmModel:
    """Build an arm from ``{"01": (shape, scale, beta), ...}``."""
    trans = {}
    for jk in TRANSITIONS:
        shape, scale, beta = params[jk]
        trans[jk] = Transition(WeibullBaseline(float(shape), float(scale)), np.asarray(beta, dtype=float))
    return ArmModel(trans["01"], trans["02"], trans["12"], float(theta))


def constant_hazard_arm(rate01: float, rate02: float, rate12: float, theta: float = 0.0, p: int = 1) -> ArmModel:
    """Exponential transitions (zero rates allowed) with null covariate effects."""

    def base(rate):
        return WeibullBaseline(1.0, np.inf if rate == 0 else 1.0 / rate)

    zero = np.zeros(p)
    return ArmModel(
        Transition(base(rate01), zero),
        Transition(base(rate02), zero),
        Transition(base(rate12), zero),
        float(theta),
    )
