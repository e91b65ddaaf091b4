"""Exact estimands computed directly from potential outcomes.

These are brute-force weighted frequencies over a (possibly weighted)
population of profiles. They serve as ground truth for the identification
formulas and the bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import CurveSet, check_grid, dumps, safe_ratio, write_long_csv
from .domain import AI_TYPES, AS_TYPES, IOS_TYPES, ProfileTable, ValidationError

ESTIMANDS = ("fice", "sace", "aice", "total", "pt89")


def weighted_cdf(times, weights, grid) -> np.ndarray:
    """``sum(w * 1{time <= t})`` for each ``t`` in ``grid`` (inf never counts)."""
    order = np.argsort(times, kind="stable")
    ts = np.asarray(times, dtype=float)[order]
    cw = np.concatenate([[0.0], np.cumsum(np.asarray(weights, dtype=float)[order])])
    return cw[np.searchsorted(ts, grid, side="right")]


def weighted_diff(t_plus, t_minus, weights, grid, chunk: int = 1 << 16) -> np.ndarray:
    """``sum(w * (1{t_plus <= t} - 1{t_minus <= t}))`` per grid point.

    Summed row-wise so subjects whose two indicators agree contribute an
    exact zero (e.g. the always-infected at the horizon).
    """
    out = np.zeros(len(grid))
    for s in range(0, len(weights), chunk):
        tp = t_plus[s:s + chunk, None]
        tm = t_minus[s:s + chunk, None]
        ind = (tp <= grid).astype(float) - (tm <= grid).astype(float)
        out += weights[s:s + chunk] @ ind
    return out


def _contrast(curves: CurveSet, name: str, t1_0, t1_1, w, mask, grid):
    """Risk difference and ratio of infection by ``t`` within ``mask``."""
    mass = w[mask].sum()
    f1 = weighted_cdf(t1_1[mask], w[mask], grid)
    f0 = weighted_cdf(t1_0[mask], w[mask], grid)
    if mass > 0:
        curves.put(name, "difference", weighted_diff(t1_1[mask], t1_0[mask], w[mask], grid) / mass)
    else:
        curves.put(name, "difference", np.full(len(grid), np.nan), np.zeros(len(grid), bool))
    ratio, ok = safe_ratio(f1, f0)
    curves.put(name, "riskRatio", ratio, ok & (mass > 0))
    return mass


@dataclass
class OracleReport:
    grid: np.ndarray
    r: float
    curves: CurveSet
    pi_as: float
    pi_ai: float
    pi_ios: float
    pt_probs: np.ndarray

    def curve(self, estimand: str, scale: str = "difference") -> np.ndarray:
        return self.curves.get(estimand, scale)

    def defined(self, estimand: str, scale: str = "difference") -> np.ndarray:
        return self.curves.defined[(estimand, scale)]

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "pi_as": self.pi_as,
            "pi_ai": self.pi_ai,
            "pi_ios": self.pi_ios,
            "pt_probs": {str(i + 1): p for i, p in enumerate(self.pt_probs)},
            **self.curves.to_dict(),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_csv(self) -> str:
        rows = []
        for (est, sc), v in self.curves.values.items():
            rows.extend((t, est, sc, x) for t, x in zip(self.grid, v))
        return write_long_csv(["t", "estimand", "scale", "value"], rows)


def oracle_estimands(profiles: ProfileTable, grid, r: float = 1.0) -> OracleReport:
    """Every estimand as an exact weighted frequency over ``profiles``.

    Curves over an empty conditioning set are flagged undefined. Risk-ratio
    curves are undefined where the arm-0 risk is zero.
    """
    grid = check_grid(grid, r)
    if len(profiles) == 0:
        raise ValidationError("no profiles")
    w = profiles.normalized_weights()
    pt = profiles.patient_types(r)
    pt_probs = np.bincount(pt - 1, weights=w, minlength=16)
    t1_0, t1_1 = profiles.t1_0, profiles.t1_1

    curves = CurveSet(grid)
    masks = {
        "fice": np.isin(pt, list(IOS_TYPES)),
        "sace": np.isin(pt, list(AS_TYPES)),
        "aice": np.isin(pt, list(AI_TYPES)),
        "total": np.ones(len(pt), dtype=bool),
        "pt89": np.isin(pt, [8, 9]),
    }
    mass = {k: _contrast(curves, k, t1_0, t1_1, w, m, grid) for k, m in masks.items()}
    return OracleReport(grid, float(r), curves, float(mass["sace"]), float(mass["aice"]), float(mass["fice"]), pt_probs)


def oracle_observed_functionals(profiles: ProfileTable, grid, r: float = 1.0, p: float = 0.5):
    """Observed-data functionals implied by ``profiles`` under randomisation.

    With treatment independent of everything, each arm's observed law is
    the marginal law of that world, so the functionals are exact weighted
    frequencies. ``p`` is validated but does not enter.
    """
    from .bounds import ObservedFunctionals

    grid = check_grid(grid, r)
    if not 0 < p < 1:
        raise ValidationError("randomisation probability must lie in (0, 1)")
    w = profiles.normalized_weights()
    ef1, ef1_r, epsi = [], [], []
    for a in (0, 1):
        t1, t2 = profiles.world(a)
        ef1.append(weighted_cdf(t1, w, grid))
        ef1_r.append(float(np.sum(w[t1 <= r])))
        epsi.append(float(np.sum(w[(t1 <= r) | (t2 > r)])))
    t1, t2 = profiles.world(0)
    both0 = float(np.sum(w[(t1 <= r) & (t2 <= r)]))
    return ObservedFunctionals(grid, np.array(ef1), np.array(ef1_r), np.array(epsi), both0, float(r))
