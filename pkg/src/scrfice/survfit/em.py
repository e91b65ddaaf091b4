"""EM fitting of the Gamma-frailty illness-death model, one arm at a time.

The E-step replaces each subject's frailty by its Gamma posterior moments;
the M-step refits three offset Cox models with Breslow baselines and
updates the frailty variance by a one-dimensional search.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..domain import ValidationError
from ..models import TRANSITIONS, ArmModel, StepBaseline, Transition
from .cox import CoxDivergenceError, CoxRows, cox_newton
from .frailty import log_abs_laplace_deriv, posterior_frailty_moments, profile_theta, update_theta


class EMConvergenceError(RuntimeError):
    """Raised when EM exhausts ``max_iter``; ``.last`` holds the final iterate."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class StructuralError(ValueError):
    """A candidate fit puts zero hazard mass on an observed event."""


@dataclass
class CoxComponent:
    transition: str
    beta: np.ndarray
    baseline: StepBaseline
    pinned: bool = False

    def cumhaz(self, t, x):
        return self.baseline.cumhaz(t) * np.exp(np.asarray(x, dtype=float) @ self.beta)


@dataclass
class ArmData:
    """Observed data of one arm, validated and arranged for fitting."""

    x: np.ndarray
    y1: np.ndarray
    d1: np.ndarray
    y2: np.ndarray
    d2: np.ndarray

    def __post_init__(self):
        self.y1 = np.asarray(self.y1, dtype=float)
        n = self.y1.shape[0]
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        self.y2 = np.asarray(self.y2, dtype=float)
        self.d1 = np.asarray(self.d1).astype(np.int64)
        self.d2 = np.asarray(self.d2).astype(np.int64)
        if n == 0:
            raise ValidationError("arm has no subjects")
        if not (self.y2.shape == self.d1.shape == self.d2.shape == (n,)):
            raise ValidationError("time and indicator columns must share one length")
        if np.any(~np.isin(self.d1, (0, 1))) or np.any(~np.isin(self.d2, (0, 1))):
            raise ValidationError("event indicators must be 0 or 1")
        if np.any(~(self.y1 > 0)) or np.any(self.y1 > self.y2):
            raise ValidationError("need 0 < y1 <= y2")
        if np.any((self.d1 == 0) & (self.y1 != self.y2)):
            raise ValidationError("y1 must equal y2 when no infection is observed")

    @property
    def n(self) -> int:
        return self.y1.shape[0]

    @property
    def delta_prime(self) -> np.ndarray:
        return self.d1 + self.d2

    @property
    def entry12(self) -> np.ndarray:
        """Left-truncation time for 1->2; nudged below ``y1`` when both events coincide."""
        return np.where(self.y1 < self.y2, self.y1, np.nextafter(self.y1, -np.inf))

    def rows(self):
        """Counting-process rows and index maps for the three transitions."""
        inf = self.d1 == 1
        zeros = np.zeros(self.n)
        return {
            "01": (CoxRows(zeros, self.y1, self.d1 == 1, self.x), np.arange(self.n)),
            "02": (CoxRows(zeros, self.y1, (self.d1 == 0) & (self.d2 == 1), self.x), np.arange(self.n)),
            "12": (
                CoxRows(self.entry12[inf], self.y2[inf], self.d2[inf] == 1, self.x[inf]),
                np.flatnonzero(inf),
            ),
        }


def compute_k(data: ArmData, components: dict) -> np.ndarray:
    """Frailty-scaled cumulative exposure of every subject."""
    c01, c02, c12 = (components[jk] for jk in TRANSITIONS)
    k = c01.cumhaz(data.y1, data.x) + c02.cumhaz(data.y1, data.x)
    h12 = (c12.baseline.cumhaz(data.y2) - c12.baseline.cumhaz(data.entry12)) * np.exp(data.x @ c12.beta)
    return k + np.where(data.d1 == 1, h12, 0.0)


def marginal_loglik(data: ArmData, components: dict, theta: float) -> float:
    """Log-likelihood with the frailty integrated out.

    Event factors use the baseline jump at each observed event time. A zero
    jump there makes the likelihood vanish and raises :class:`StructuralError`.
    """
    k = compute_k(data, components)
    total = np.sum(log_abs_laplace_deriv(theta, k, data.delta_prime))
    masks = {
        "01": (data.d1 == 1, data.y1),
        "02": ((data.d1 == 0) & (data.d2 == 1), data.y1),
        "12": ((data.d1 == 1) & (data.d2 == 1), data.y2),
    }
    for jk, (m, t) in masks.items():
        if not m.any():
            continue
        comp = components[jk]
        jumps = comp.baseline.jump_at(t[m])
        if np.any(jumps <= 0):
            raise StructuralError(f"transition {jk} has zero baseline jump at an observed event time")
        total += np.sum(np.log(jumps)) + np.sum(data.x[m] @ comp.beta)
    return float(total)


@dataclass
class ArmFit:
    """Fitted components and frailty variance for one arm."""

    components: dict
    theta: float
    k: np.ndarray
    delta_prime: np.ndarray
    posterior_mean: np.ndarray
    posterior_log_mean: np.ndarray
    iterations: int
    final_change: float
    loglik_trace: list
    notes: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def arm_model(self) -> ArmModel:
        tr = {jk: Transition(c.baseline, c.beta) for jk, c in self.components.items()}
        return ArmModel(tr["01"], tr["02"], tr["12"], self.theta)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "components": {
                jk: {
                    "beta": c.beta.tolist(),
                    "times": c.baseline.times.tolist(),
                    "jumps": c.baseline.jumps.tolist(),
                    "pinned": c.pinned,
                }
                for jk, c in self.components.items()
            },
            "subjects": {
                "k": self.k.tolist(),
                "delta_prime": self.delta_prime.tolist(),
                "posterior_mean": self.posterior_mean.tolist(),
                "posterior_log_mean": self.posterior_log_mean.tolist(),
            },
            "convergence": {
                "iterations": self.iterations,
                "final_change": self.final_change,
                "loglik_trace": list(self.loglik_trace),
            },
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmFit":
        comps = {
            jk: CoxComponent(jk, np.asarray(c["beta"], dtype=float),
                             StepBaseline(np.asarray(c["times"], dtype=float), np.asarray(c["jumps"], dtype=float)),
                             bool(c.get("pinned", False)))
            for jk, c in d["components"].items()
        }
        s = d["subjects"]
        conv = d["convergence"]
        return cls(
            comps, float(d["theta"]), np.asarray(s["k"], dtype=float), np.asarray(s["delta_prime"], dtype=np.int64),
            np.asarray(s["posterior_mean"], dtype=float), np.asarray(s["posterior_log_mean"], dtype=float),
            int(conv["iterations"]), float(conv["final_change"]), list(conv["loglik_trace"]), list(d.get("notes", [])),
        )


class _Engine:
    """Fast EM map on a flat parameter vector.

    Jump times of every Breslow baseline are the observed event times and
    never move, so exposures are precomputed as indices into cumulative
    jump sums. The vector is ``(beta01, beta02, beta12, log jumps01,
    log jumps02, log jumps12, log theta)``.
    """

    def __init__(self, data: ArmData, notes: list, theta_step: str = "ecme", theta_fixed=None):
        if theta_step not in ("ecme", "em"):
            raise ValidationError(f"unknown theta_step {theta_step!r}")
        self.theta_step = theta_step
        self.theta_fixed = theta_fixed
        self.data = data
        self.notes = notes
        self.rows = data.rows()
        self.p = data.x.shape[1]
        self.dp = data.delta_prime
        self.times = {jk: cr.times for jk, (cr, _) in self.rows.items()}
        t = self.times
        self.idx = {
            "01": np.searchsorted(t["01"], data.y1, side="right"),
            "02": np.searchsorted(t["02"], data.y1, side="right"),
            "12_hi": np.searchsorted(t["12"], data.y2, side="right"),
            "12_lo": np.searchsorted(t["12"], data.entry12, side="right"),
        }
        inf = data.d1 == 1
        self.event_masks = {
            "01": inf,
            "02": (data.d1 == 0) & (data.d2 == 1),
            "12": inf & (data.d2 == 1),
        }
        # position of each event time within its transition's jump vector
        self.event_pos = {
            "01": np.searchsorted(t["01"], data.y1[self.event_masks["01"]]),
            "02": np.searchsorted(t["02"], data.y1[self.event_masks["02"]]),
            "12": np.searchsorted(t["12"], data.y2[self.event_masks["12"]]),
        }
        sizes = [self.p] * 3 + [len(t[jk]) for jk in TRANSITIONS]
        self.slices = np.cumsum([0] + sizes)
        self.pinned = {jk: cr.n_events == 0 for jk, (cr, _) in self.rows.items()}

    def unpack(self, z):
        sl = self.slices
        betas = {jk: z[sl[i]:sl[i + 1]] for i, jk in enumerate(TRANSITIONS)}
        logj = {jk: z[sl[3 + i]:sl[4 + i]] for i, jk in enumerate(TRANSITIONS)}
        return betas, logj, float(np.exp(z[-1]))

    def pack(self, betas, jumps, theta):
        with np.errstate(divide="ignore"):
            parts = [betas[jk] for jk in TRANSITIONS] + [np.log(jumps[jk]) for jk in TRANSITIONS]
        return np.concatenate(parts + [[np.log(theta)]])

    def k(self, betas, logj):
        x = self.data.x
        cum = {jk: np.concatenate([[0.0], np.cumsum(np.exp(logj[jk]))]) for jk in TRANSITIONS}
        k = cum["01"][self.idx["01"]] * np.exp(x @ betas["01"]) + cum["02"][self.idx["02"]] * np.exp(x @ betas["02"])
        h12 = (cum["12"][self.idx["12_hi"]] - cum["12"][self.idx["12_lo"]]) * np.exp(x @ betas["12"])
        return k + np.where(self.data.d1 == 1, h12, 0.0)

    def loglik(self, z) -> float:
        betas, logj, theta = self.unpack(z)
        k = self.k(betas, logj)
        total = np.sum(log_abs_laplace_deriv(theta, k, self.dp))
        for jk in TRANSITIONS:
            m = self.event_masks[jk]
            if m.any():
                total += np.sum(logj[jk][self.event_pos[jk]]) + np.sum(self.data.x[m] @ betas[jk])
        return float(total)

    def m_step(self, offset, prev_betas=None):
        betas, jumps = {}, {}
        for jk, (cr, idx) in self.rows.items():
            if cr.n_events == 0:
                betas[jk], jumps[jk] = np.zeros(self.p), np.empty(0)
                continue
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                res = cox_newton(cr, offset=offset[idx], beta0=None if prev_betas is None else prev_betas[jk])
            for w in caught:
                msg = f"transition {jk}: {w.message}"
                if msg not in self.notes:
                    self.notes.append(msg)
            betas[jk], jumps[jk] = res.beta, res.baseline.jumps
        return betas, jumps

    def em_map(self, z):
        betas, logj, theta = self.unpack(z)
        eg, elg = posterior_frailty_moments(theta, self.k(betas, logj), self.dp)
        nb, nj = self.m_step(np.log(eg), betas)
        if self.theta_fixed is not None:
            new_theta = self.theta_fixed
        elif self.theta_step == "em":
            new_theta = update_theta(eg, elg)
        else:
            logj = {jk: np.log(nj[jk]) for jk in TRANSITIONS}
            new_theta = profile_theta(self.k(nb, logj), self.dp)
        return self.pack(nb, nj, new_theta)

    def fit(self, z, tol, ll_tol, max_iter, accelerate):
        ll = self.loglik(z)
        trace = [ll]
        nb = 3 * self.p
        change = np.inf
        for it in range(1, max_iter + 1):
            z1 = self.em_map(z)
            new, new_ll = z1, None
            if accelerate:
                z2 = self.em_map(z1)
                ll2 = self.loglik(z2)
                new, new_ll = z2, ll2
                r, v = z1 - z, z2 - 2 * z1 + z
                nv = np.sqrt(np.dot(v, v))
                if nv > 0:
                    alpha = min(-1.0, -np.sqrt(np.dot(r, r)) / nv)
                    z_ex = z - 2 * alpha * r + alpha ** 2 * v
                    try:
                        z_st = self.em_map(z_ex)
                        ll_st = self.loglik(z_st)
                    except (CoxDivergenceError, FloatingPointError, ValueError):
                        ll_st = -np.inf
                    if np.isfinite(ll_st) and ll_st >= ll2:
                        new, new_ll = z_st, ll_st
            if new_ll is None:
                new_ll = self.loglik(new)
            old_p = np.concatenate([z[:nb], [np.exp(z[-1])]])
            new_p = np.concatenate([new[:nb], [np.exp(new[-1])]])
            change = float(np.max(np.abs(new_p - old_p) / np.maximum(np.abs(old_p), 1.0)))
            dll = abs(new_ll - ll)
            z, ll = new, new_ll
            trace.append(ll)
            if change < tol and dll < ll_tol:
                return z, it, change, trace, True
        return z, max_iter, change, trace, False

    def to_fit(self, z, iterations, change, trace) -> ArmFit:
        betas, logj, theta = self.unpack(z)
        comps = {
            jk: CoxComponent(jk, np.array(betas[jk]), StepBaseline(self.times[jk].copy(), np.exp(logj[jk])),
                             pinned=self.pinned[jk])
            for jk in TRANSITIONS
        }
        k = self.k(betas, logj)
        eg, elg = posterior_frailty_moments(theta, k, self.dp)
        return ArmFit(comps, theta, k, self.dp, eg, elg, iterations, change, trace, self.notes)


def em_fit(x, y1, d1, y2, d2, tol: float = 1e-6, ll_tol: float = 1e-6, max_iter: int = 500,
           theta_init: float = 1.0, accelerate: bool = True, theta_step: str = "ecme",
           theta_fixed=None) -> ArmFit:
    """Fit one arm's frailty illness-death model by EM.

    Starts from ``gamma == 1`` for the Cox fits and ``theta = theta_init``.
    Stops when the largest relative change ``|new - old| / max(|old|, 1)``
    over all coefficients and ``theta`` is below ``tol`` and the marginal
    log-likelihood moves by less than ``ll_tol``.

    ``theta_step="em"`` updates ``theta`` by maximising the expected Gamma
    complete-data log-density under the posterior; ``"ecme"`` (default)
    maximises the marginal log-likelihood in ``theta`` at the new
    coefficients and baselines. Both are monotone and share fixed points,
    but the complete-data step crawls when ``theta`` heads to zero.
    ``theta_fixed`` holds ``theta`` at a given positive value and only
    updates the Cox components.

    With ``accelerate`` each iteration takes two EM steps, extrapolates
    along them (SQUAREM) and keeps the extrapolated point only if it does
    not lower the marginal log-likelihood, so the recorded trace stays
    monotone and the fixed point is that of plain EM.

    Raises
    ------
    EMConvergenceError
        If ``max_iter`` iterations pass without meeting both criteria.
    """
    data = ArmData(x, y1, d1, y2, d2)
    notes: list = []
    if theta_fixed is not None:
        if not theta_fixed > 0:
            raise ValidationError("theta_fixed must be positive")
        theta_init = theta_fixed = float(theta_fixed)
    eng = _Engine(data, notes, theta_step, theta_fixed)
    for jk, empty in eng.pinned.items():
        if empty:
            msg = f"transition {jk} has no events; coefficients and baseline pinned at zero"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if not theta_init > 0:
        raise ValidationError("theta_init must be positive")
    betas, jumps = eng.m_step(np.zeros(data.n))
    z0 = eng.pack(betas, jumps, float(theta_init))
    z, it, change, trace, ok = eng.fit(z0, tol, ll_tol, max_iter, accelerate)
    fit = eng.to_fit(z, it, change, trace)
    if not ok:
        raise EMConvergenceError(f"EM did not converge in {max_iter} iterations (last change {change:.3g})", fit)
    return fit


@dataclass
class FrailtyIllnessDeathFit:
    """Both arms' fits: six Cox components and two frailty variances."""

    arms: dict

    @property
    def theta0(self) -> float:
        return self.arms[0].theta

    @property
    def theta1(self) -> float:
        return self.arms[1].theta

    def arm_model(self, a: int) -> ArmModel:
        return self.arms[a].arm_model()

    def to_json(self) -> str:
        return json.dumps({"arms": {str(a): f.to_dict() for a, f in self.arms.items()}})

    @classmethod
    def from_json(cls, text: str) -> "FrailtyIllnessDeathFit":
        d = json.loads(text)
        return cls({int(a): ArmFit.from_dict(v) for a, v in d["arms"].items()})


def fit_frailty_illness_death(x, treat, y1, d1, y2, d2, threads: int = 1, **kw) -> FrailtyIllnessDeathFit:
    """Fit both arms; with ``threads > 1`` the arms run concurrently."""
    treat = np.asarray(treat)
    x = np.asarray(x, dtype=float).reshape(len(treat), -1)
    cols = [np.asarray(c) for c in (y1, d1, y2, d2)]

    def one(a):
        m = treat == a
        return em_fit(x[m], *(c[m] for c in cols), **kw)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=2) as ex:
            fits = list(ex.map(one, (0, 1)))
    else:
        fits = [one(0), one(1)]
    return FrailtyIllnessDeathFit({0: fits[0], 1: fits[1]})
