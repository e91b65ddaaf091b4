"""Gamma frailty algebra: Laplace-transform derivatives and posterior moments."""

from __future__ import annotations

import numpy as np
from scipy import optimize, special

from ..integrals import THETA_TINY

THETA_FLOOR = 1e-8


def log_abs_laplace_deriv(theta, k, q):
    """``log|phi^(q)(k)|`` for the unit-mean Gamma(1/theta) frailty.

    Uses ``log1p`` so small ``theta`` stays accurate; ``theta = 0`` gives the
    degenerate frailty (``phi(k) = exp(-k)``), as does any ``theta`` below
    :data:`THETA_TINY`, where ``1/theta`` would overflow.
    """
    theta = np.asarray(theta, dtype=float)
    k = np.asarray(k, dtype=float)
    q = np.asarray(q)
    qmax = int(np.max(q)) if q.size else 0
    coef = np.zeros(np.broadcast(theta, q).shape)
    for j in range(1, qmax + 1):
        coef = coef + np.where(q > j, np.log1p(j * theta), 0.0)
    pos = theta > THETA_TINY
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(pos, theta, 1.0)
        tail = np.where(pos, -(1.0 / safe + q) * np.log1p(safe * k), -k)
    return coef + tail


def gamma_laplace_deriv(theta, k, q):
    """``q``-th derivative of ``E[exp(-k * gamma)]`` with ``gamma ~ Gamma(1/theta, theta)``.

    ``phi^(q)(k) = (-1)^q prod_{j<q}(1 + j theta) (1 + theta k)^(-1/theta - q)``.

    Examples
    --------
    >>> float(gamma_laplace_deriv(1.0, 1.0, 2))
    0.25
    """
    q = np.asarray(q)
    if np.any(q < 0):
        raise ValueError("derivative order must be non-negative")
    val = np.exp(log_abs_laplace_deriv(theta, k, q))
    out = np.where(q % 2 == 1, -val, val)
    return out if out.ndim else float(out)


def posterior_frailty_moments(theta, k, delta_prime):
    """``(E[gamma | D], E[log gamma | D])`` from the Gamma posterior.

    The posterior has shape ``1/theta + delta'`` and rate ``1/theta + k``.
    At ``theta = 0`` (or below :data:`THETA_TINY`) the frailty is degenerate at 1.
    """
    theta = np.asarray(theta, dtype=float)
    k = np.asarray(k, dtype=float)
    dp = np.asarray(delta_prime, dtype=float)
    pos = theta > THETA_TINY
    safe = np.where(pos, theta, 1.0)
    mean = np.where(pos, (1.0 + safe * dp) / (1.0 + safe * k), 1.0)
    shape = 1.0 / safe + dp
    rate = 1.0 / safe + k
    logm = np.where(pos, special.digamma(shape) - np.log(rate), 0.0)
    if mean.ndim == 0:
        return float(mean), float(logm)
    return mean, logm


def expected_gamma_loglik(theta: float, e_gamma, e_log_gamma) -> float:
    """Sum over subjects of ``E[log f_theta(gamma) | D]`` for the unit-mean Gamma law."""
    a = 1.0 / theta
    n = np.size(e_gamma)
    return float(
        (a - 1.0) * np.sum(e_log_gamma) - a * np.sum(e_gamma) - n * (special.gammaln(a) + a * np.log(theta))
    )


def update_theta(e_gamma, e_log_gamma, bounds=(-10.0, 5.0)) -> float:
    """Maximise :func:`expected_gamma_loglik` over ``log theta`` by bounded Brent."""
    return _bounded_argmax(lambda lt: expected_gamma_loglik(np.exp(lt), e_gamma, e_log_gamma), bounds)


def profile_theta(k, delta_prime, bounds=(-10.0, 5.0)) -> float:
    """``theta`` maximising ``sum log|phi^(delta')(k)|`` with ``k`` held fixed."""
    return _bounded_argmax(lambda lt: float(np.sum(log_abs_laplace_deriv(np.exp(lt), k, delta_prime))), bounds)


def _bounded_argmax(f, bounds) -> float:
    """``exp`` of the maximiser of ``f`` on ``bounds`` by Brent.

    Brent never evaluates the end points, so an optimum on the boundary
    comes back a hair inside it; it is snapped onto the bound when that is
    no worse, which keeps fits with no detectable frailty identical.
    """
    res = optimize.minimize_scalar(lambda lt: -f(lt), bounds=bounds, method="bounded", options={"xatol": 1e-10})
    best, val = float(res.x), -float(res.fun)
    for end in bounds:
        if abs(best - end) < 1e-4 and f(end) >= val:
            best, val = end, f(end)
    return float(np.exp(best))
