"""Point identification under Gamma frailty, as a function of the cross-world correlation.

Given both arms' models and ``rho``, every cross-world quantity is an
expectation over covariates and the frailty pair of products of
world-specific probabilities. Conditional on the shared Gamma component
``G_c`` of the frailty pair the two worlds are independent, and each world's
own component is integrated out in closed form. Only ``G_c`` is drawn by
Monte Carlo; at ``rho = 0`` it vanishes and the result is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .curves import CurveSet, check_grid, dumps, write_long_csv
from .domain import PATIENT_TYPES, ValidationError
from .integrals import ArmGeometry, GammaLaplace, unique_rows, world_curves
from .models import ArmModel
from .simulate import FrailtyConfig

STRATUM_FLOOR = 1e-6
_CHUNK_ELEMS = 2_000_000
_DRAW_CHUNK = 256
AUTO_PAIRED_ABOVE = 200_000


@dataclass
class ConditionalCurves:
    """World probabilities for one covariate row at a fixed frailty value."""

    grid: np.ndarray
    f1: np.ndarray
    s00: np.ndarray
    c11: float
    c10: float
    c01: float
    c00: float

    @property
    def psi(self) -> float:
        return self.c11 + self.c10 + self.c01


class _Fixed:
    """Transform for a known frailty value: ``exp(-gamma s)``."""

    def __init__(self, gamma: float):
        self.gamma = float(gamma)

    def __call__(self, s, g=None):
        return np.exp(-self.gamma * s)


def conditional_curves(model: ArmModel, x, gamma: float, grid, r: float = 1.0,
                       mesh_points: int = 300) -> ConditionalCurves:
    """Infection curve, event-free survivor and horizon cells given ``gamma``."""
    if not gamma > 0:
        raise ValidationError("frailty value must be positive")
    grid = check_grid(grid, r)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    wc = world_curves(ArmGeometry(model, grid, r, mesh_points), x, _Fixed(gamma))
    h = model.t01.baseline.cumhaz(grid) * model.t01.risk(x)[0] + model.t02.baseline.cumhaz(grid) * model.t02.risk(x)[0]
    return ConditionalCurves(
        grid, wc.f1[0, 0], np.exp(-gamma * h), float(wc.c11[0, 0]), float(wc.c10[0, 0]),
        float(wc.c01[0, 0]), float(wc.c00[0, 0]),
    )


def nnh(difference):
    """Number needed to harm, ``1 / |difference|``; ``None`` for a zero difference."""
    d = abs(float(difference))
    return None if d == 0 or not np.isfinite(d) else 1.0 / d


# Per-draw accumulators: name -> function of (wc0, wc1) returning (m, D[, G]).
def _terms(w0, w1):
    return {
        "pi_ios": w0.psi * w1.psi,
        "fice1": w1.f1 * w0.psi[..., None],
        "fice0": w0.f1 * w1.psi[..., None],
        "pi_as": w0.surv * w1.surv,
        "sace1": w1.j * w0.surv[..., None],
        "sace0": w0.j * w1.surv[..., None],
        "pi_ai": w0.f1_r * w1.f1_r,
        "aice1": w1.f1 * w0.f1_r[..., None],
        "aice0": w0.f1 * w1.f1_r[..., None],
        "total1": w1.f1,
        "total0": w0.f1,
        "pt891": (w1.f1 - w1.j) * w0.c01[..., None],
        "pt890": (w0.f1 - w0.j) * w1.c01[..., None],
        "pi_pt89": w0.c10 * w1.c01 + w0.c01 * w1.c10,
        "pt": np.stack([w0.cell(i0, s0) * w1.cell(i1, s1) for i0, s0, i1, s1 in PATIENT_TYPES], axis=-1),
    }


@dataclass
class SensitivityReport:
    rho: float
    grid: np.ndarray
    r: float
    mc_draws: int
    curves: CurveSet
    pi: dict  # name -> (value, mc_se)
    pt_probs: np.ndarray
    pt_se: np.ndarray
    nnh: float = None
    notes: list = field(default_factory=list)

    @property
    def pi_ios(self) -> float:
        return self.pi["ios"][0]

    @property
    def pi_as(self) -> float:
        return self.pi["as"][0]

    @property
    def pi_ai(self) -> float:
        return self.pi["ai"][0]

    def curve(self, estimand: str, scale: str = "difference") -> np.ndarray:
        return self.curves.get(estimand, scale)

    def se(self, estimand: str, scale: str = "difference") -> np.ndarray:
        return self.curves.se[(estimand, scale)]

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "r": self.r,
            "mc_draws": self.mc_draws,
            "pi": {k: {"value": v, "mc_se": s} for k, (v, s) in self.pi.items()},
            "pt_probs": {str(i + 1): {"value": p, "mc_se": s} for i, (p, s) in enumerate(zip(self.pt_probs, self.pt_se))},
            "nnh": self.nnh,
            "notes": self.notes,
            **self.curves.to_dict(),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def csv_rows(self):
        for (est, sc), v in self.curves.values.items():
            se = self.curves.se.get((est, sc), np.full(len(v), np.nan))
            for t, x, s in zip(self.grid, v, se):
                yield (self.rho, t, est, sc, x, s)

    def to_csv(self) -> str:
        return write_long_csv(["rho", "t", "estimand", "scale", "value", "mc_se"], self.csv_rows())


def sensitivity_csv(reports) -> str:
    rows = [row for rep in reports for row in rep.csv_rows()]
    return write_long_csv(["rho", "t", "estimand", "scale", "value", "mc_se"], rows)


def _ratio_stats(num, den):
    """Mean ratio of per-draw sums and its delta-method standard error."""
    d = num.shape[0]
    mn, md = num.mean(axis=0), den.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        est = mn / md
        if d > 1:
            resid = num - est * den
            se = resid.std(axis=0, ddof=1) / (np.sqrt(d) * np.abs(md))
        else:
            se = np.zeros_like(est)
    return est, se


def _mean_stats(v):
    d = v.shape[0]
    return v.mean(axis=0), (v.std(axis=0, ddof=1) / np.sqrt(d) if d > 1 else np.zeros(v.shape[1:]))


def sensitivity_analysis(model0: ArmModel, model1: ArmModel, rho: float, rows, grid, r: float = 1.0,
                         mc_draws: int = 2000, seed: int = 0, weights=None, threads: int = 1,
                         mesh_points: int = 300, design: str = "crossed") -> SensitivityReport:
    """All frailty-identified estimands at one ``rho``.

    With ``design="crossed"`` the same ``mc_draws`` draws of the shared
    frailty component are used for every covariate row (common random
    numbers across rows, times and estimands). ``"paired"`` gives each draw
    a single row, picked by systematic sampling on the row weights, so the
    cost no longer grows with the number of rows; ``"auto"`` picks paired
    once rows times draws exceeds :data:`AUTO_PAIRED_ABOVE`. Standard errors
    are Monte Carlo errors over the draws.
    """
    grid = check_grid(grid, r)
    if int(mc_draws) < 1:
        raise ValidationError("mc_draws must be >= 1")
    if design not in ("crossed", "paired", "auto"):
        raise ValidationError(f"unknown design {design!r}")
    cfg = FrailtyConfig(model0.theta, model1.theta, float(rho))
    sc = cfg.shared_shape
    x, w = unique_rows(rows, weights)
    for a, m in enumerate((model0, model1)):
        if x.shape[1] != m.p:
            raise ValidationError(f"rows have {x.shape[1]} covariates, arm {a} model expects {m.p}")
    geoms = [ArmGeometry(m, grid, r, mesh_points) for m in (model0, model1)]
    trans = [GammaLaplace(cfg.theta(a), sc if cfg.theta(a) > 0 else 0.0) for a in (0, 1)]
    if sc > 0:
        g = rngmod.stream(seed, "sensitivity", repr(float(rho))).gamma(sc, 1.0, int(mc_draws))
        chunks = [g[s:s + _DRAW_CHUNK] for s in range(0, len(g), _DRAW_CHUNK)]
    else:
        chunks = [None]
    kmax = max(gm.K for gm in geoms)
    if design == "auto":
        design = "paired" if x.shape[0] * int(mc_draws) > AUTO_PAIRED_ABOVE else "crossed"
    if sc > 0 and design == "paired":
        per_draw = _paired(geoms, trans, x, w, g, kmax, rngmod.stream(seed, "sensitivity-rows", repr(float(rho))),
                           threads)
        return _assemble(per_draw, float(rho), grid, float(r), int(mc_draws))

    def run(gchunk):
        dc = 1 if gchunk is None else len(gchunk)
        step = max(1, _CHUNK_ELEMS // (dc * kmax))
        acc = None
        for s in range(0, x.shape[0], step):
            xs, ws = x[s:s + step], w[s:s + step]
            terms = _terms(*(world_curves(gm, xs, tr, gchunk) for gm, tr in zip(geoms, trans)))
            part = {k: np.tensordot(ws, v, axes=(0, 0)) for k, v in terms.items()}
            acc = part if acc is None else {k: acc[k] + part[k] for k in acc}
        return acc

    parts = rngmod.map_ordered(run, chunks, threads)
    per_draw = {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}
    return _assemble(per_draw, float(rho), grid, float(r), int(mc_draws) if sc > 0 else 1)


def _paired(geoms, trans, x, w, g, kmax, gen, threads):
    d = len(g)
    cw = np.cumsum(w)
    pick = np.minimum(np.searchsorted(cw, (gen.uniform() + np.arange(d)) / d * cw[-1], side="right"), len(w) - 1)
    step = max(1, _CHUNK_ELEMS // kmax)

    def run(s):
        xs, gs = x[pick[s:s + step]], g[s:s + step]
        terms = _terms(*(world_curves(gm, xs, tr, gs, paired=True) for gm, tr in zip(geoms, trans)))
        return {k: v[:, 0] for k, v in terms.items()}

    parts = rngmod.map_ordered(run, list(range(0, d, step)), threads)
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def _assemble(q: dict, rho, grid, r, draws) -> SensitivityReport:
    cs = CurveSet(grid)
    pi = {}
    for name, key in (("ios", "pi_ios"), ("as", "pi_as"), ("ai", "pi_ai"), ("pt89", "pi_pt89")):
        pi[name] = tuple(float(v) for v in _mean_stats(q[key]))
    notes = []
    g = len(grid)
    specs = (("fice", "pi_ios", 0.0), ("sace", "pi_as", STRATUM_FLOOR), ("aice", "pi_ai", STRATUM_FLOOR),
             ("pt89", "pi_pt89", STRATUM_FLOOR))
    for est, den_key, floor in specs:
        n1, n0 = q[f"{est}1"], q[f"{est}0"]
        den = np.repeat(q[den_key][:, None], g, axis=1)
        ok = np.full(g, den.mean() > floor)
        if not ok.all():
            notes.append(f"{est}: stratum probability {den.mean():.3g} too small; curve undefined")
        d, dse = _ratio_stats(n1 - n0, den)
        cs.put(est, "difference", d, ok, dse)
        rr, rse = _ratio_stats(n1, n0)
        cs.put(est, "riskRatio", rr, ok & (n0.mean(axis=0) > 0), rse)
    d, dse = _mean_stats(q["total1"] - q["total0"])
    cs.put("total", "difference", d, None, dse)
    rr, rse = _ratio_stats(q["total1"], q["total0"])
    cs.put("total", "riskRatio", rr, q["total0"].mean(axis=0) > 0, rse)
    pt, pt_se = _mean_stats(q["pt"])
    fice_r = cs.get("fice")[-1] if np.isclose(grid[-1], r) else np.nan
    return SensitivityReport(rho, grid, r, draws, cs, pi, pt, pt_se, nnh(fice_r) if np.isfinite(fice_r) else None, notes)


DEFAULT_RHOS = (0.0, 0.25, 0.5, 0.75, 1.0)


def sensitivity_sweep(model0, model1, rows, grid, rhos=DEFAULT_RHOS, **kw) -> list:
    """One report per ``rho``."""
    return [sensitivity_analysis(model0, model1, rho, rows, grid, **kw) for rho in rhos]


def identify_fice(model0, model1, rho, rows, grid, **kw):
    """``(fice difference, fice risk ratio, pi_ios)``."""
    rep = sensitivity_analysis(model0, model1, rho, rows, grid, **kw)
    return rep.curve("fice"), rep.curve("fice", "riskRatio"), rep.pi_ios


def identify_strata(model0, model1, rho, rows, r: float = 1.0, **kw):
    """``(pt_probs, pi_as, pi_ai, pi_ios)``."""
    rep = sensitivity_analysis(model0, model1, rho, rows, [r], r=r, **kw)
    return rep.pt_probs, rep.pi_as, rep.pi_ai, rep.pi_ios


def identify_sace_aice_total(model0, model1, rho, rows, grid, **kw) -> dict:
    """``{estimand: (difference, risk ratio)}`` for SACE, AICE and the total effect."""
    rep = sensitivity_analysis(model0, model1, rho, rows, grid, **kw)
    return {e: (rep.curve(e), rep.curve(e, "riskRatio")) for e in ("sace", "aice", "total")}


def effect_pt89(model0, model1, rho, rows, grid, **kw):
    """Effect among patient types 8 and 9 (difference scale)."""
    return sensitivity_analysis(model0, model1, rho, rows, grid, **kw).curve("pt89")
