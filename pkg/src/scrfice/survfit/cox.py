"""Cox partial likelihood with left truncation and offsets.

Risk sets are the half-open intervals ``(entry, exit]``; tied event times
use the Breslow convention.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..models import StepBaseline


class CoxDivergenceError(RuntimeError):
    """Monotone likelihood: a coefficient runs off to infinity."""


class CoxRows:
    """Pre-sorted counting-process rows for repeated fits.

    Sorting and event-time bookkeeping depend only on the times, so the EM
    loop builds this once per transition and refits with new offsets.
    """

    def __init__(self, entry, exit, event, x):
        self.entry = np.asarray(entry, dtype=float)
        self.exit = np.asarray(exit, dtype=float)
        self.event = np.asarray(event).astype(bool)
        x = np.asarray(x, dtype=float)
        self.x = x.reshape(len(self.exit), -1)
        n = len(self.exit)
        if not (self.entry.shape == self.event.shape == (n,)):
            raise ValueError("entry, exit and event must have equal length")
        if np.any(self.entry >= self.exit):
            raise ValueError("each row needs entry < exit")

        self.exit_order = np.argsort(self.exit, kind="stable")
        self.entry_order = np.argsort(self.entry, kind="stable")
        self.exit_sorted = self.exit[self.exit_order]
        self.entry_sorted = self.entry[self.entry_order]
        ev_times = self.exit[self.event]
        self.times, inv = np.unique(ev_times, return_inverse=True)
        self.d = np.bincount(inv, minlength=len(self.times)).astype(float)
        self.x_event_sum = self.x[self.event].sum(axis=0)
        # at risk at tau: exit >= tau (exit_pos onward) minus entry >= tau
        self.exit_pos = np.searchsorted(self.exit_sorted, self.times, side="left")
        self.entry_pos = np.searchsorted(self.entry_sorted, self.times, side="left")
        self.truncated = bool(np.any(self.entry_pos < n))
        p = self.x.shape[1]
        # [1, x, x x^T] per row, pre-permuted into both sort orders
        z = np.concatenate([np.ones((n, 1)), self.x, (self.x[:, :, None] * self.x[:, None, :]).reshape(n, p * p)], axis=1)
        self._z_exit = z[self.exit_order]
        self._z_entry = z[self.entry_order] if self.truncated else None
        self._pinned = None

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def pinned(self) -> np.ndarray:
        if self._pinned is None:
            self._pinned = _pin_mask(self.x)
        return self._pinned

    @staticmethod
    def _tails(w_sorted, z_sorted, pos, cols):
        v = w_sorted[:, None] * z_sorted[:, :cols]
        rev = np.cumsum(v[::-1], axis=0)[::-1]
        rev = np.concatenate([rev, np.zeros((1, cols))], axis=0)
        return rev[pos]

    def risk_sums(self, beta, offset, order: int = 2):
        """Risk-set sums of ``w``, ``w x`` and ``w x x^T`` at each event time.

        ``w = exp(eta - shift)`` with ``shift = max(eta)`` for stability.
        """
        eta = self.x @ np.asarray(beta, dtype=float) + offset
        shift = eta.max()
        w = np.exp(eta - shift)
        p = self.p
        cols = 1 + (p if order >= 1 else 0) + (p * p if order >= 2 else 0)
        s = self._tails(w[self.exit_order], self._z_exit, self.exit_pos, cols)
        if self.truncated:
            s = s - self._tails(w[self.entry_order], self._z_entry, self.entry_pos, cols)
        out = [s[:, 0]]
        if order >= 1:
            out.append(s[:, 1:1 + p])
        if order >= 2:
            out.append(s[:, 1 + p:].reshape(len(s), p, p))
        return shift, eta, out


@dataclass
class CoxResult:
    beta: np.ndarray
    loglik: float
    score: np.ndarray
    information: np.ndarray
    iterations: int
    pinned: np.ndarray
    baseline: StepBaseline
    warnings: list = field(default_factory=list)


def _pin_mask(x: np.ndarray) -> np.ndarray:
    """Columns that are constant or linearly dependent on earlier ones."""
    p = x.shape[1]
    pinned = np.zeros(p, dtype=bool)
    if x.shape[0] == 0:
        return np.ones(p, dtype=bool)
    xc = x - x.mean(axis=0)
    kept = []
    for j in range(p):
        col = xc[:, j]
        scale = np.abs(col).max()
        if scale == 0:
            pinned[j] = True
            continue
        cand = kept + [j]
        if np.linalg.matrix_rank(xc[:, cand] / np.abs(xc[:, cand]).max(axis=0), tol=1e-10 * np.sqrt(len(col))) < len(cand):
            pinned[j] = True
        else:
            kept.append(j)
    return pinned


def partial_loglik(rows: CoxRows, beta, offset) -> float:
    shift, eta, (s0,) = rows.risk_sums(np.asarray(beta, dtype=float), offset, order=0)
    return float(eta[rows.event].sum() - np.dot(rows.d, np.log(s0) + shift))


def _derivatives(rows: CoxRows, beta, offset):
    shift, eta, (s0, s1, s2) = rows.risk_sums(beta, offset, order=2)
    ll = eta[rows.event].sum() - np.dot(rows.d, np.log(s0) + shift)
    m1 = s1 / s0[:, None]
    score = rows.x_event_sum - (rows.d[:, None] * m1).sum(axis=0)
    info = (rows.d[:, None, None] * (s2 / s0[:, None, None] - m1[:, :, None] * m1[:, None, :])).sum(axis=0)
    return float(ll), score, info


def breslow(rows: CoxRows, beta, offset) -> StepBaseline:
    """Breslow baseline cumulative hazard: jump ``d(t) / sum_risk exp(x b + off)``."""
    if rows.n_events == 0:
        return StepBaseline.zero()
    shift, _, (s0,) = rows.risk_sums(np.asarray(beta, dtype=float), offset, order=0)
    return StepBaseline(rows.times.copy(), rows.d / (s0 * np.exp(shift)))


def cox_newton(rows: CoxRows, offset=None, tol: float = 1e-9, max_iter: int = 100, beta0=None,
               cap: float = 25.0) -> CoxResult:
    """Maximise the log partial likelihood by damped Newton-Raphson.

    Converged when the largest absolute score component drops below
    ``tol``. Constant or collinear columns are pinned at zero with a
    warning. A coefficient exceeding ``cap`` in magnitude while the score
    is still non-zero, or a converged fit whose information has collapsed,
    raises :class:`CoxDivergenceError`.
    """
    n, p = rows.x.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    notes = []
    if rows.n_events == 0:
        notes.append("no events: coefficients pinned at 0 and baseline set to zero")
        return CoxResult(np.zeros(p), 0.0, np.zeros(p), np.zeros((p, p)), 0, np.ones(p, dtype=bool),
                         StepBaseline.zero(), notes)
    pinned = rows.pinned
    if pinned.any():
        msg = f"columns {np.flatnonzero(pinned).tolist()} have no usable variation; pinned at 0"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    free = ~pinned
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    beta[pinned] = 0.0

    ll, score, info = _derivatives(rows, beta, offset)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score[free]), initial=0.0) < tol:
            it -= 1
            break
        h = info[np.ix_(free, free)]
        try:
            step_free = np.linalg.solve(h, score[free])
        except np.linalg.LinAlgError:
            step_free = np.linalg.lstsq(h, score[free], rcond=None)[0]
        step = np.zeros(p)
        step[free] = step_free
        for _ in range(40):
            cand = beta + step
            ll_new, score_new, info_new = _derivatives(rows, cand, offset)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step /= 2.0
        beta, ll, score, info = cand, ll_new, score_new, info_new
        if np.max(np.abs(beta)) > cap and np.max(np.abs(score[free])) > tol:
            raise CoxDivergenceError(
                f"coefficient magnitude {np.max(np.abs(beta)):.3g} exceeds {cap} with score "
                f"{np.max(np.abs(score[free])):.3g}; likelihood appears monotone"
            )
    else:
        if np.max(np.abs(score[free]), initial=0.0) >= tol:
            raise CoxDivergenceError(f"Newton did not reach |score| < {tol} in {max_iter} iterations")
    flat = np.diag(info)[free] < 1e-8 * rows.n_events
    if np.any(flat):
        # the score vanished only because the likelihood flattened out at infinity
        raise CoxDivergenceError(
            f"information for columns {np.flatnonzero(free)[flat].tolist()} vanished at |beta| = "
            f"{np.max(np.abs(beta)):.3g}; likelihood appears monotone"
        )
    return CoxResult(beta, ll, score, info, it, pinned, breslow(rows, beta, offset), notes)
