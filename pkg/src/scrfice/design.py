"""Matched study design: propensity score, caliper matching, balance and bootstrap.

The reference arm for matching is arm 0: each arm-0 subject, taken in
ascending order of propensity score, picks its nearest unmatched arm-1
subject among those within the caliper.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .curves import fmt
from .domain import ValidationError
from .survfit.cox import _pin_mask

Z_95 = 1.96


class SeparationError(RuntimeError):
    """Logistic MLE does not exist: a coefficient diverges."""


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed."""


@dataclass
class PropensityModel:
    """Logistic model for ``Pr(A = 1 | X)``.

    ``coefficients[0]`` is the intercept; pinned columns hold 0.
    """

    coefficients: np.ndarray
    probabilities: np.ndarray
    score: np.ndarray
    iterations: int
    pinned: np.ndarray
    warnings: list = field(default_factory=list)

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _expit(self.coefficients[0] + x @ self.coefficients[1:])


def _expit(eta):
    return np.exp(-np.logaddexp(0.0, -eta))


def fit_propensity(x, treat, tol: float = 1e-10, max_iter: int = 100, cap: float = 30.0) -> PropensityModel:
    """Newton-Raphson logistic regression of ``treat`` on ``x`` with intercept.

    Covariates are standardised internally; constant or collinear columns
    are pinned at zero with a warning. A standardised coefficient passing
    ``cap``, or fitted probabilities collapsing to 0/1 on a perfect fit,
    signals separation.

    Raises
    ------
    SeparationError
        If the likelihood has no finite maximiser.
    """
    treat = np.asarray(treat)
    x = np.asarray(x, dtype=float).reshape(len(treat), -1)
    n, p = x.shape
    if not np.all(np.isin(treat, (0, 1))):
        raise ValidationError("treat must be 0 or 1")
    n1 = int(treat.sum())
    if n1 == 0 or n1 == n:
        raise ValidationError("both arms must be present")
    y = treat.astype(float)
    notes = []
    pinned = _pin_mask(x) if p else np.zeros(0, dtype=bool)
    if pinned.any():
        msg = f"covariate columns {np.flatnonzero(pinned).tolist()} are constant or collinear; pinned at 0"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    keep = ~pinned
    mu = x[:, keep].mean(axis=0)
    sd = x[:, keep].std(axis=0)
    z = np.column_stack([np.ones(n), (x[:, keep] - mu) / sd])
    b = np.zeros(z.shape[1])
    b[0] = np.log(n1 / (n - n1))

    def loglik(beta):
        eta = z @ beta
        return float(y @ eta - np.sum(np.logaddexp(0.0, eta)))

    ll = loglik(b)
    for it in range(1, max_iter + 1):
        pr = _expit(z @ b)
        score = z.T @ (y - pr)
        if np.max(np.abs(score)) / n < tol:
            break
        info = (z * (pr * (1 - pr))[:, None]).T @ z
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix is singular; outcome is separated") from None
        t = 1.0
        while True:
            cand = b + t * step
            new_ll = loglik(cand)
            if new_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        b, ll = cand, new_ll
        if np.max(np.abs(b[1:]), initial=0.0) > cap or ll > -1e-8 * n:
            raise SeparationError("a propensity coefficient diverges; the arms are (quasi-)separated by X")
    else:
        raise SeparationError(f"logistic Newton did not converge in {max_iter} iterations")
    pr = _expit(z @ b)
    if np.any(pr <= 0) or np.any(pr >= 1):
        raise SeparationError("fitted probabilities reached 0 or 1")
    # back to the original covariate scale
    coef = np.zeros(p + 1)
    slopes = b[1:] / sd
    coef[1:][keep] = slopes
    coef[0] = b[0] - slopes @ mu
    x_score = np.column_stack([np.ones(n), x]).T @ (y - pr)
    return PropensityModel(coef, pr, x_score, it, pinned, notes)


@dataclass
class MatchedSet:
    """Pairs ``(index in arm 0, index in arm 1)`` as row indices of the input."""

    pairs: np.ndarray
    distance: np.ndarray
    ps: np.ndarray
    caliper_sd: float
    caliper: float
    unmatched: dict
    mode: str = "mahalanobis"

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def indices(self) -> np.ndarray:
        """Row indices of all matched subjects, pair by pair."""
        return self.pairs.ravel()

    def check(self, treat) -> None:
        """Assert injectivity, arm membership and the caliper."""
        if len(self.pairs):
            i0, i1 = self.pairs[:, 0], self.pairs[:, 1]
            assert len(np.unique(i0)) == len(i0) and len(np.unique(i1)) == len(i1)
            assert np.all(treat[i0] == 0) and np.all(treat[i1] == 1)
            assert np.all(np.abs(self.ps[i0] - self.ps[i1]) <= self.caliper)

    def to_csv(self, ids=None) -> str:
        ids = np.arange(len(self.ps)).astype(str) if ids is None else np.asarray(ids).astype(str)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair_id", "id0", "id1", "ps0", "ps1", "distance"])
        for k, ((i0, i1), d) in enumerate(zip(self.pairs, self.distance)):
            w.writerow([k + 1, ids[i0], ids[i1], fmt(self.ps[i0]), fmt(self.ps[i1]), fmt(d)])
        return buf.getvalue()


def _whitener(x: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``(u - v) L`` having Euclidean norm equal to the Mahalanobis distance."""
    p = x.shape[1]
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if np.linalg.matrix_rank(cov) < p:
        tr = np.trace(cov)
        cov = cov + (1e-8 * tr / p if tr > 0 else 1e-8) * np.eye(p)
    return np.linalg.cholesky(np.linalg.inv(cov))


def mahalanobis_match(x, treat, ps, caliper_sd: float = 0.3, mode: str = "mahalanobis") -> MatchedSet:
    """Greedy 1:1 matching without replacement inside a propensity caliper.

    Parameters
    ----------
    x : (n, p) covariates (distance is Mahalanobis on these)
    treat : (n,) arm labels
    ps : PropensityModel or (n,) propensity scores
    caliper_sd : caliper width in standard deviations of the score over all subjects
    mode : ``"mahalanobis"`` or ``"ps"`` (distance is the score difference)

    Arm-0 subjects are processed in ascending score order (ties by row
    index); among candidates at equal distance the smallest row index wins.
    Subjects with no candidate stay unmatched.
    """
    treat = np.asarray(treat)
    x = np.asarray(x, dtype=float).reshape(len(treat), -1)
    ps = np.asarray(getattr(ps, "probabilities", ps), dtype=float)
    if ps.shape != treat.shape:
        raise ValidationError("propensity scores must match the number of subjects")
    if not caliper_sd >= 0:
        raise ValidationError("caliper must be non-negative")
    if mode not in ("mahalanobis", "ps"):
        raise ValidationError(f"unknown matching mode {mode!r}")
    caliper = float(caliper_sd) * float(np.std(ps, ddof=1)) if len(ps) > 1 else 0.0
    if mode == "mahalanobis" and x.shape[1]:
        coords = x @ _whitener(x)
    else:
        coords = ps[:, None]
    idx0 = np.flatnonzero(treat == 0)
    idx1 = np.flatnonzero(treat == 1)
    order0 = idx0[np.lexsort((idx0, ps[idx0]))]
    # arm-1 candidates sorted by score, with row index as tiebreak for the window scan
    cand = idx1[np.lexsort((idx1, ps[idx1]))]
    cps = ps[cand]
    free = np.ones(len(cand), dtype=bool)
    pairs, dist = [], []
    for i in order0:
        lo = np.searchsorted(cps, ps[i] - caliper, side="left")
        hi = np.searchsorted(cps, ps[i] + caliper, side="right")
        win = np.arange(lo, hi)[free[lo:hi]]
        # guard against rounding at the window edges
        win = win[np.abs(cps[win] - ps[i]) <= caliper]
        if len(win) == 0:
            continue
        d = np.sqrt(np.sum((coords[cand[win]] - coords[i]) ** 2, axis=1))
        best = np.flatnonzero(d == d.min())
        k = win[best[np.argmin(cand[win[best]])]]
        free[k] = False
        pairs.append((i, cand[k]))
        dist.append(float(d[np.searchsorted(win, k)]))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    unmatched = {0: len(idx0) - len(pairs), 1: len(idx1) - len(pairs)}
    return MatchedSet(pairs, np.array(dist), ps, float(caliper_sd), caliper, unmatched, mode)


def smd(x, treat) -> np.ndarray:
    """Standardised mean difference per column; 0 where the pooled variance is 0."""
    treat = np.asarray(treat)
    x = np.asarray(x, dtype=float).reshape(len(treat), -1)
    a, b = x[treat == 1], x[treat == 0]
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("each arm needs at least two subjects for an SMD")
    pooled = np.sqrt((a.var(axis=0, ddof=1) + b.var(axis=0, ddof=1)) / 2)
    diff = a.mean(axis=0) - b.mean(axis=0)
    return np.where(pooled > 0, diff / np.where(pooled > 0, pooled, 1.0), 0.0)


@dataclass
class SMDTable:
    names: tuple
    before: np.ndarray
    after: Optional[np.ndarray] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["covariate", "smd_before", "smd_after"])
        after = self.after if self.after is not None else np.full(len(self.before), np.nan)
        for name, b, a in zip(self.names, self.before, after):
            w.writerow([name, fmt(b), fmt(a)])
        return buf.getvalue()


def smd_table(x, treat, matched: Optional[MatchedSet] = None, names=None) -> SMDTable:
    treat = np.asarray(treat)
    x = np.asarray(x, dtype=float).reshape(len(treat), -1)
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(x.shape[1]))
    after = None
    if matched is not None:
        idx = matched.indices
        after = smd(x[idx], treat[idx])
    return SMDTable(names, smd(x, treat), after)


@dataclass
class BootstrapResult:
    point: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    failures: int
    errors: list = field(default_factory=list)


def pair_bootstrap(n_units: int, statistic: Callable, B: int = 200, seed: int = 0, threads: int = 1,
                   max_fail: float = 0.10) -> BootstrapResult:
    """Resample ``n_units`` units (pairs) with replacement ``B`` times.

    ``statistic`` receives an integer index array into the units and returns
    a scalar or array. Replicate ``b`` uses its own random stream, so results
    do not depend on ``threads``. Failing replicates are skipped; more than
    ``max_fail`` of them is an error. Non-finite entries are skipped per
    value when computing the SE.
    """
    if int(B) < 2:
        raise ValidationError("B must be at least 2")
    if n_units < 1:
        raise ValidationError("nothing to resample")
    point = np.asarray(statistic(np.arange(n_units)), dtype=float)

    def one(b):
        idx = rngmod.stream(seed, "bootstrap", b).integers(0, n_units, n_units)
        try:
            val = np.asarray(statistic(idx), dtype=float)
        except Exception as exc:  # noqa: BLE001  (any failure on a resample is recorded)
            return None, f"replicate {b}: {type(exc).__name__}: {exc}"
        if val.shape != point.shape:
            return None, f"replicate {b}: statistic changed shape"
        return val, None

    out = rngmod.map_ordered(one, list(range(int(B))), threads)
    errors = [e for _, e in out if e is not None]
    if len(errors) > max_fail * B:
        raise BootstrapError(f"{len(errors)} of {B} bootstrap replicates failed; first: {errors[0]}")
    reps = np.array([v for v, _ in out if v is not None]).reshape(-1, *point.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fin = np.isfinite(reps)
        cnt = fin.sum(axis=0)
        filled = np.where(fin, reps, 0.0)
        mean = filled.sum(axis=0) / np.maximum(cnt, 1)
        var = np.where(fin, (reps - mean) ** 2, 0.0).sum(axis=0) / np.maximum(cnt - 1, 1)
    se = np.where(cnt >= 2, np.sqrt(var), np.nan)
    return BootstrapResult(point, se, point - Z_95 * se, point + Z_95 * se, reps, len(errors), errors)
