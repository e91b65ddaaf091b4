"""Partial identification of the feasible-infection effect.

Every bound here is a closed-form function of a handful of observed-data
functionals: the covariate-averaged infection curve of each arm, each arm's
probability of being infected or alive at the horizon, and the arm-0
probability of both events by the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import check_grid, dumps, write_long_csv
from .domain import ValidationError
from .integrals import ArmGeometry, GammaLaplace, unique_rows, world_curves
from .models import ArmModel

ASSUMPTIONS = ("iosORP", "weakORP", "none")
_TOL = 1e-9
_CHUNK_ELEMS = 2_000_000


@dataclass
class ObservedFunctionals:
    """Covariate-averaged observed-data functionals.

    Attributes
    ----------
    grid : (G,) times in ``(0, r]``
    ef1 : (2, G) infection-by-``t`` probability per arm
    ef1_r : (2,) infection-by-``r`` probability per arm
    epsi : (2,) probability of being infected by ``r`` or alive at ``r``
    eboth0 : float, arm-0 probability of infection and death by ``r``
    r : float, horizon
    """

    grid: np.ndarray
    ef1: np.ndarray
    ef1_r: np.ndarray
    epsi: np.ndarray
    eboth0: float
    r: float = 1.0

    def __post_init__(self):
        self.grid = check_grid(self.grid, self.r)
        self.ef1 = np.asarray(self.ef1, dtype=float).reshape(2, -1)
        self.ef1_r = np.asarray(self.ef1_r, dtype=float).reshape(2)
        self.epsi = np.asarray(self.epsi, dtype=float).reshape(2)
        self.eboth0 = float(self.eboth0)
        if self.ef1.shape[1] != len(self.grid):
            raise ValidationError("infection curves must match the grid")
        vals = np.concatenate([self.ef1.ravel(), self.ef1_r, self.epsi, [self.eboth0]])
        if np.any(~np.isfinite(vals)) or np.any(vals < -_TOL) or np.any(vals > 1 + _TOL):
            raise ValidationError("functionals must be probabilities in [0, 1]")
        if np.any(np.diff(self.ef1, axis=1) < -_TOL):
            raise ValidationError("infection curves must be nondecreasing")
        if np.any(self.ef1_r > self.epsi + _TOL):
            raise ValidationError("infection by r cannot exceed the infected-or-alive probability")

    @property
    def es1(self) -> np.ndarray:
        return 1.0 - self.ef1

    @classmethod
    def from_scalars(cls, epsi0, epsi1, ef1_0, ef1_1, eboth0=0.0, r=1.0, ef1_r=None):
        """Single-time-point functionals (``grid = [r]``)."""
        ef1 = np.array([[ef1_0], [ef1_1]], dtype=float)
        ef1_r = ef1[:, 0] if ef1_r is None else ef1_r
        return cls(np.array([r]), ef1, ef1_r, np.array([epsi0, epsi1]), eboth0, r)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid, "ef1": self.ef1, "ef1_r": self.ef1_r, "epsi": self.epsi,
            "eboth0": self.eboth0, "r": self.r,
        }


def functionals_from_fit(model0: ArmModel, model1: ArmModel, rows, grid, r: float = 1.0, weights=None,
                         mesh_points: int = 300) -> ObservedFunctionals:
    """Observed functionals implied by two fitted arms, averaged over ``rows``.

    The Gamma frailty of each arm is integrated out exactly through its
    Laplace transform, so no Monte Carlo draws are needed.
    """
    grid = check_grid(grid, r)
    x, w = unique_rows(rows, weights)
    ef1, ef1_r, epsi = [], [], []
    both0 = 0.0
    for a, model in enumerate((model0, model1)):
        if x.shape[1] != model.p:
            raise ValidationError(f"rows have {x.shape[1]} covariates, arm {a} model expects {model.p}")
        geom = ArmGeometry(model, grid, r, mesh_points)
        step = max(1, _CHUNK_ELEMS // geom.K)
        acc = np.zeros(len(grid) + 3)
        for s in range(0, x.shape[0], step):
            wc = world_curves(geom, x[s:s + step], GammaLaplace(model.theta))
            ws = w[s:s + step]
            acc += np.concatenate([ws @ wc.f1[:, 0, :], [ws @ wc.f1_r[:, 0], ws @ wc.psi[:, 0], ws @ wc.c10[:, 0]]])
        ef1.append(acc[:-3])
        ef1_r.append(float(acc[-3]))
        epsi.append(float(acc[-2]))
        if a == 0:
            both0 = float(acc[-1])
    clip = lambda v: np.clip(v, 0.0, 1.0)  # noqa: E731  (rounding at the 1e-16 level)
    return ObservedFunctionals(grid, clip(np.array(ef1)), clip(np.array(ef1_r)), clip(np.array(epsi)),
                               float(clip(both0)), r)


def falsify_ios_orp(func: ObservedFunctionals) -> str:
    """``"not_falsified"`` when arm-0 infected-or-alive does not exceed arm 1's."""
    return "not_falsified" if func.epsi[0] <= func.epsi[1] else "falsified"


def pi_ios_bounds(func: ObservedFunctionals, assumption: str) -> tuple[float, float]:
    """Bounds on the ios proportion; a point is returned as ``(v, v)``."""
    p0, p1 = func.epsi
    if assumption == "iosORP":
        return float(p0), float(p0)
    if assumption == "weakORP":
        return float(max(func.ef1_r[0], p0 + p1 - 1.0)), float(min(p0, p1 + func.eboth0))
    if assumption == "none":
        return float(max(0.0, p0 + p1 - 1.0)), float(min(p0, p1))
    raise ValidationError(f"unknown assumption {assumption!r}; expected one of {ASSUMPTIONS}")


def _divide(num, den_pos, den_neg):
    """``num / den`` choosing the denominator by the sign of ``num``.

    A zero denominator sends the ratio to ``+-1`` by sign (0 for ``num = 0``).
    """
    den = np.where(num >= 0, den_pos, den_neg)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.sign(num))
    return out


def numerators(func: ObservedFunctionals, assumption: str):
    """Lower and upper numerator curves for the weak-ORP and no-ORP bounds."""
    f0, f1 = func.ef1
    s0, s1 = func.es1
    p0, p1 = func.epsi
    if assumption == "weakORP":
        u = np.minimum(f1, p0) - f0
        lo = np.maximum(0.0, p0 - s1) - f0
    elif assumption == "none":
        u = np.minimum(f1, p0) - np.maximum(0.0, p1 - s0)
        lo = np.maximum(0.0, p0 - s1) - np.minimum(f0, p1)
    else:
        raise ValidationError(f"numerators are defined for weakORP and none, not {assumption!r}")
    return lo, u


def fice_bounds(func: ObservedFunctionals, assumption: str):
    """Difference-scale bounds ``(lower, upper, defined)`` over the grid.

    Values are clipped to ``[-1, 1]``. Bounds are undefined when the ios
    proportion is forced to zero.
    """
    g = len(func.grid)
    f0, f1 = func.ef1
    s1 = func.es1[1]
    lo_pi, up_pi = pi_ios_bounds(func, assumption)
    if up_pi <= 0:
        nan = np.full(g, np.nan)
        return nan, nan.copy(), np.zeros(g, dtype=bool)
    if assumption == "iosORP":
        p0 = func.epsi[0]
        upper = np.minimum(1.0, f1 / p0) - f0 / p0
        lower = np.maximum(0.0, 1.0 - s1 / p0) - f0 / p0
    else:
        lo_num, up_num = numerators(func, assumption)
        upper = _divide(up_num, lo_pi, up_pi)
        lower = _divide(lo_num, up_pi, lo_pi)
    return np.clip(lower, -1.0, 1.0), np.clip(upper, -1.0, 1.0), np.ones(g, dtype=bool)


def _rr_divide(num, den):
    """Risk-ratio division: ``x / 0`` is ``+inf`` for ``x > 0``; ``0 / 0`` is undefined."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, np.nan))
    return out


def fice_bounds_rr(func: ObservedFunctionals, assumption: str):
    """Risk-ratio bounds ``(lower, upper, defined)`` over the grid.

    Under weak-ORP and ios-ORP the two coincide. Without ORP an upper bound
    with a vanishing denominator is ``+inf`` (non-informative).
    """
    f0, f1 = func.ef1
    s0, s1 = func.es1
    p0, p1 = func.epsi
    num_lo = np.maximum(0.0, p0 - s1)
    num_up = np.minimum(p0, f1)
    if assumption in ("iosORP", "weakORP"):
        ok = f0 > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            lower = np.where(ok, num_lo / np.where(ok, f0, 1.0), np.nan)
            upper = np.where(ok, num_up / np.where(ok, f0, 1.0), np.nan)
    elif assumption == "none":
        lower = _rr_divide(num_lo, np.minimum(p1, f0))
        upper = _rr_divide(num_up, np.maximum(0.0, p1 - s0))
        ok = ~np.isnan(lower) & ~np.isnan(upper)
    else:
        raise ValidationError(f"unknown assumption {assumption!r}; expected one of {ASSUMPTIONS}")
    lower = np.where(ok, lower, np.nan)
    upper = np.where(ok, upper, np.nan)
    return lower, upper, ok


@dataclass
class BoundsReport:
    """All bound variants for one set of functionals."""

    functionals: ObservedFunctionals
    falsification: str
    pi_ios: dict
    curves: dict = field(default_factory=dict)  # (assumption, scale) -> (lower, upper, defined)

    @property
    def grid(self) -> np.ndarray:
        return self.functionals.grid

    def to_dict(self) -> dict:
        out = {}
        for (assumption, scale), (lo, up, ok) in self.curves.items():
            out.setdefault(assumption, {})[scale] = {"lower": lo, "upper": up, "defined": ok}
        return {
            "grid": self.grid,
            "falsification": self.falsification,
            "pi_ios": {k: {"lower": v[0], "upper": v[1]} for k, v in self.pi_ios.items()},
            "functionals": self.functionals.to_dict(),
            "bounds": out,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_csv(self) -> str:
        rows = []
        for (assumption, scale), (lo, up, ok) in self.curves.items():
            for t, a, b, d in zip(self.grid, lo, up, ok):
                rows.append((t, assumption, scale, a if d else None, b if d else None))
        return write_long_csv(["t", "assumption", "scale", "lower", "upper"], rows)


def bounds_report(func: ObservedFunctionals, assumptions=ASSUMPTIONS) -> BoundsReport:
    rep = BoundsReport(func, falsify_ios_orp(func), {a: pi_ios_bounds(func, a) for a in assumptions})
    for a in assumptions:
        rep.curves[(a, "difference")] = fice_bounds(func, a)
        rep.curves[(a, "riskRatio")] = fice_bounds_rr(func, a)
    return rep
