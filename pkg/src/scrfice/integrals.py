"""Frailty-integrated illness-death probabilities on a time mesh.

Given one arm's transition model and a covariate row, the probability of
infection by ``t``, of infection by ``t`` followed by survival past ``r``,
and of staying event-free through ``r`` are sums over mesh intervals. On
each interval the 0->1 and 0->2 cumulative hazards grow by ``A`` and ``B``
(already multiplied by ``exp(x beta)``); conditional on frailty ``gamma``
the infection mass is ``A / (A + B) * (exp(-gamma h) - exp(-gamma (h + A + B)))``
where ``h`` is the cumulative hazard before the interval. Replacing
``exp(-gamma s)`` by a Laplace transform ``E[exp(-gamma s)]`` integrates the
frailty out exactly.

For step baselines the mesh contains every jump time, so each interval
carries at most one jump per transition and the sums are exact. For
continuous baselines a quadratic mesh refined near zero is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ArmModel


THETA_TINY = 1e-10


@dataclass(frozen=True)
class GammaLaplace:
    """``E[exp(-gamma s) | G_c = g]`` for ``gamma = theta * (G_c + G_own)``.

    ``G_own ~ Gamma(1/theta - shared)``. With ``shared = 0`` this is the
    plain unit-mean Gamma transform ``(1 + theta s)^(-1/theta)`` and ``g``
    is ignored. ``theta = 0`` is the degenerate frailty; values below
    :data:`THETA_TINY` are treated as degenerate too (``1/theta`` would
    overflow, and the relative error is about ``theta s^2``).
    """

    theta: float
    shared: float = 0.0

    @property
    def own_shape(self) -> float:
        return 1.0 / self.theta - self.shared if self.theta > THETA_TINY else 0.0

    def __call__(self, s, g=None):
        if self.theta <= THETA_TINY:
            return np.exp(-s)
        own = self.own_shape
        out = np.exp(-own * np.log1p(self.theta * s)) if own > 0 else np.ones(np.shape(s))
        if g is not None and self.shared > 0:
            out = out * np.exp(-self.theta * s * g)
        return out


class ArmGeometry:
    """Mesh and baseline increments of one arm, shared across covariate rows."""

    def __init__(self, model: ArmModel, grid, r: float, mesh_points: int = 300):
        grid = np.asarray(grid, dtype=float)
        self.model = model
        self.r = float(r)
        t01, t02, t12 = model.t01, model.t02, model.t12
        step = not (getattr(t01.baseline, "continuous", False) or getattr(t02.baseline, "continuous", False))
        if step:
            jumps = np.concatenate([t01.baseline.times, t02.baseline.times])
            jumps = jumps[(jumps > 0) & (jumps <= r)]
        else:
            jumps = r * (np.arange(1, mesh_points + 1) / mesh_points) ** 2
        mesh = np.unique(np.concatenate([[0.0], jumps, grid, [r]]))
        self.exact = step
        self.mesh = mesh
        self.K = len(mesh) - 1
        h01 = t01.baseline.cumhaz(mesh)
        h02 = t02.baseline.cumhaz(mesh)
        self.d01 = np.diff(h01)
        self.d02 = np.diff(h02)
        u = mesh[1:] if step else 0.5 * (mesh[:-1] + mesh[1:])
        self.tail12 = t12.baseline.cumhaz(np.array([r]))[0] - t12.baseline.cumhaz(u)
        # intervals 1..idx lie at or before each grid point
        self.grid_idx = np.searchsorted(mesh, grid, side="left")
        if np.any(mesh[self.grid_idx] != grid):
            raise AssertionError("grid points must be mesh nodes")

    def terms(self, x):
        """Per-row interval increments ``A``, ``B`` and 1->2 tails ``C``, each ``(m, K)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = self.model
        a = self.d01 * m.t01.risk(x)[:, None]
        b = self.d02 * m.t02.risk(x)[:, None]
        c = self.tail12 * m.t12.risk(x)[:, None]
        return a, b, c


@dataclass
class WorldCurves:
    """Frailty-averaged probabilities for rows (and draws) in one world.

    Arrays have shape ``(m, D, G)`` for curves and ``(m, D)`` for scalars;
    ``D = 1`` when the frailty is integrated out exactly.
    """

    f1: np.ndarray  # Pr(T1 <= t)
    j: np.ndarray  # Pr(T1 <= t, T2 > r)
    f1_r: np.ndarray
    j_r: np.ndarray
    c01: np.ndarray  # Pr(T1 > r, T2 > r)

    @property
    def c11(self):
        return self.j_r

    @property
    def c10(self):
        return self.f1_r - self.j_r

    @property
    def c00(self):
        return 1.0 - self.f1_r - self.c01

    @property
    def psi(self):
        return self.f1_r + self.c01

    @property
    def surv(self):
        """``Pr(T2 > r)``."""
        return self.j_r + self.c01

    def cell(self, i: int, s: int):
        """``Pr(I = i, S = s)``."""
        return {(1, 1): self.c11, (1, 0): self.c10, (0, 1): self.c01, (0, 0): self.c00}[(i, s)]


def world_curves(geom: ArmGeometry, x, transform: GammaLaplace, g=None, paired: bool = False) -> WorldCurves:
    """Evaluate :class:`WorldCurves` for covariate rows ``x`` and shared draws ``g``.

    Every row meets every draw unless ``paired``, in which case row ``i``
    uses draw ``g[i]`` only and ``D = 1``.
    """
    a, b, c = geom.terms(x)
    ab = a + b
    hcum = np.concatenate([np.zeros((ab.shape[0], 1)), np.cumsum(ab, axis=1)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(ab > 0, a / np.where(ab > 0, ab, 1.0), 0.0)
    if g is None:
        gg = None
    elif paired:
        gg = np.asarray(g, dtype=float)[:, None, None]
    else:
        gg = np.asarray(g, dtype=float)[None, :, None]
    hcum3, h3, ab3, c3, frac3 = hcum[:, None, :], hcum[:, None, :-1], ab[:, None, :], c[:, None, :], frac[:, None, :]
    tc = transform(hcum3, gg)
    inf = frac3 * (tc[..., :-1] - tc[..., 1:])
    jm = frac3 * (transform(h3 + c3, gg) - transform(h3 + ab3 + c3, gg))
    f1 = np.cumsum(inf, axis=-1)
    j = np.cumsum(jm, axis=-1)
    gi = geom.grid_idx - 1
    return WorldCurves(f1[..., gi], j[..., gi], f1[..., -1], j[..., -1], tc[..., -1])


def unique_rows(x, weights=None):
    """Deduplicate covariate rows, summing their (normalised) weights."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    if x.shape[1] == 0:
        return np.zeros((1, 0)), np.array([1.0])
    ux, inv = np.unique(x, axis=0, return_inverse=True)
    uw = np.bincount(inv.ravel(), weights=w, minlength=ux.shape[0])
    return ux, uw
