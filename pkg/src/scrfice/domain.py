"""Potential outcomes, patient types and the observation map.

Times are in years. ``inf`` encodes "no infection" in a world. A patient type
is the integer 1..16 indexing the quadruple ``(I(0), S(0), I(1), S(1))`` where
``I(a) = 1{T1(a) <= r}`` and ``S(a) = 1{T2(a) > r}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

INF = np.inf

# (I0, S0, I1, S1) for pt = 1..16, in table order.
PATIENT_TYPES: tuple[tuple[int, int, int, int], ...] = (
    (0, 0, 0, 0),
    (1, 0, 0, 0),
    (0, 1, 0, 0),
    (0, 0, 1, 0),
    (0, 0, 0, 1),
    (1, 1, 0, 0),
    (0, 0, 1, 1),
    (1, 0, 0, 1),
    (0, 1, 1, 0),
    (1, 0, 1, 0),
    (0, 1, 0, 1),
    (1, 1, 1, 0),
    (1, 0, 1, 1),
    (1, 1, 0, 1),
    (0, 1, 1, 1),
    (1, 1, 1, 1),
)

# 4-bit code i0<<3 | s0<<2 | i1<<1 | s1  ->  pt
_CODE_TO_PT = np.zeros(16, dtype=np.int64)
for _pt, (_i0, _s0, _i1, _s1) in enumerate(PATIENT_TYPES, start=1):
    _CODE_TO_PT[_i0 << 3 | _s0 << 2 | _i1 << 1 | _s1] = _pt

AS_TYPES = frozenset({11, 14, 15, 16})
AI_TYPES = frozenset({10, 12, 13, 16})
IOS_TYPES = frozenset(range(8, 17))

EXCLUSIONS = {
    "ORP": frozenset({2, 6, 8, 14}),
    "iosORP": frozenset({2, 3, 6}),
    "weakORP": frozenset({2, 6}),
    "monotonicity": frozenset({3, 6, 9, 12}),
}


class ValidationError(ValueError):
    """Input violates a domain invariant."""


@dataclass(frozen=True)
class PotentialOutcomeProfile:
    """Cross-world event times of one subject."""

    t1_0: float
    t2_0: float
    t1_1: float
    t2_1: float

    def __post_init__(self):
        for a in (0, 1):
            t1, t2 = self.times(a)
            if not t2 > 0:
                raise ValidationError(f"t2_{a} must be positive, got {t2}")
            if np.isfinite(t1) and t1 > t2:
                raise ValidationError(f"t1_{a}={t1} follows death at t2_{a}={t2}")

    def times(self, a: int) -> tuple[float, float]:
        return (self.t1_0, self.t2_0) if a == 0 else (self.t1_1, self.t2_1)


@dataclass(frozen=True)
class IndicatorQuadruple:
    i0: bool
    s0: bool
    i1: bool
    s1: bool
    r: float = 1.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return int(self.i0), int(self.s0), int(self.i1), int(self.s1)


@dataclass(frozen=True)
class StratumFlags:
    is_as: bool
    is_ai: bool
    is_ios: bool


@dataclass(frozen=True)
class ObservedRecord:
    """One subject's observed data.

    ``y1 = min(T1, T2, C, 1)``, ``y2 = min(T2, C, 1)``; ``d1``/``d2`` flag an
    observed infection / death.
    """

    id: str
    covariates: tuple[float, ...]
    treat: int
    y1: float
    d1: int
    y2: float
    d2: int

    def __post_init__(self):
        if self.treat not in (0, 1):
            raise ValidationError(f"treat must be 0 or 1, got {self.treat}")
        if self.d1 not in (0, 1) or self.d2 not in (0, 1):
            raise ValidationError("event indicators must be 0 or 1")
        if not (0 < self.y1 <= self.y2 <= 1):
            raise ValidationError(f"need 0 < y1 <= y2 <= 1, got y1={self.y1}, y2={self.y2}")
        if self.d1 == 0 and self.y1 != self.y2:
            raise ValidationError("without infection y1 must equal y2")


def _check_r(r: float) -> None:
    if not (0 < r <= 1):
        raise ValidationError(f"horizon r must lie in (0, 1], got {r}")


def indicators_from_profile(profile: PotentialOutcomeProfile, r: float = 1.0) -> IndicatorQuadruple:
    _check_r(r)
    return IndicatorQuadruple(
        i0=bool(profile.t1_0 <= r),
        s0=bool(profile.t2_0 > r),
        i1=bool(profile.t1_1 <= r),
        s1=bool(profile.t2_1 > r),
        r=r,
    )


def classify_patient_type(q: IndicatorQuadruple) -> int:
    i0, s0, i1, s1 = q.as_tuple()
    return int(_CODE_TO_PT[i0 << 3 | s0 << 2 | i1 << 1 | s1])


def stratum_flags(pt: int) -> StratumFlags:
    if not 1 <= pt <= 16:
        raise ValidationError(f"patient type must be in 1..16, got {pt}")
    return StratumFlags(pt in AS_TYPES, pt in AI_TYPES, pt in IOS_TYPES)


def excluded_by(pt: int, assumption: str) -> bool:
    try:
        return pt in EXCLUSIONS[assumption]
    except KeyError:
        raise ValidationError(f"unknown assumption {assumption!r}; expected one of {sorted(EXCLUSIONS)}") from None


def observe(profile: PotentialOutcomeProfile, treat: int, censor: Optional[float] = None) -> dict:
    """Apply consistency and right censoring to a profile.

    Returns the time/indicator fields of an :class:`ObservedRecord`.
    """
    y1, d1, y2, d2 = observe_arrays(
        np.array([profile.t1_0 if treat == 0 else profile.t1_1]),
        np.array([profile.t2_0 if treat == 0 else profile.t2_1]),
        None if censor is None else np.array([censor]),
    )
    return {"y1": float(y1[0]), "d1": int(d1[0]), "y2": float(y2[0]), "d2": int(d2[0])}


# ---------------------------------------------------------------------------
# vectorised forms


def observe_arrays(t1, t2, censor=None, horizon: float = 1.0):
    """Vectorised :func:`observe` on the realised world's times.

    Ties between censoring and an event resolve in favour of the event.
    """
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    end = np.full(t2.shape, float(horizon))
    if censor is not None:
        c = np.asarray(censor, dtype=float)
        if np.any(c <= 0):
            raise ValidationError("censoring times must be positive")
        end = np.minimum(end, c)
    d1 = (t1 <= end).astype(np.int64)
    d2 = (t2 <= end).astype(np.int64)
    y2 = np.minimum(t2, end)
    y1 = np.minimum(np.minimum(t1, t2), end)
    return y1, d1, y2, d2


def indicator_arrays(t1, t2, r: float = 1.0):
    """``(I, S)`` integer arrays for one world."""
    _check_r(r)
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    return (t1 <= r).astype(np.int64), (t2 > r).astype(np.int64)


def patient_type_array(t1_0, t2_0, t1_1, t2_1, r: float = 1.0) -> np.ndarray:
    """Patient type of every subject, as an int array with values 1..16."""
    i0, s0 = indicator_arrays(t1_0, t2_0, r)
    i1, s1 = indicator_arrays(t1_1, t2_1, r)
    return _CODE_TO_PT[i0 << 3 | s0 << 2 | i1 << 1 | s1]


@dataclass
class ProfileTable:
    """Column store of potential outcomes for a population.

    ``weight`` holds population proportions (normalised on use); frailties
    are optional and only carried for output.
    """

    t1_0: np.ndarray
    t2_0: np.ndarray
    t1_1: np.ndarray
    t2_1: np.ndarray
    weight: Optional[np.ndarray] = None
    gamma0: Optional[np.ndarray] = None
    gamma1: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("t1_0", "t2_0", "t1_1", "t2_1"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.t1_0.shape[0]
        if any(getattr(self, k).shape != (n,) for k in ("t2_0", "t1_1", "t2_1")):
            raise ValidationError("profile columns must share one length")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=float)
            if self.weight.shape != (n,) or np.any(self.weight < 0):
                raise ValidationError("weights must be a non-negative vector of matching length")
        for t1, t2, a in ((self.t1_0, self.t2_0, 0), (self.t1_1, self.t2_1, 1)):
            if np.any(~(t2 > 0)):
                raise ValidationError(f"t2_{a} must be positive")
            if np.any(np.isfinite(t1) & (t1 > t2)):
                raise ValidationError(f"t1_{a} exceeds t2_{a} for some subject")

    def __len__(self) -> int:
        return self.t1_0.shape[0]

    @classmethod
    def from_profiles(cls, profiles, weights=None) -> "ProfileTable":
        cols = np.array([[p.t1_0, p.t2_0, p.t1_1, p.t2_1] for p in profiles], dtype=float).reshape(-1, 4)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], weight=weights)

    def normalized_weights(self) -> np.ndarray:
        n = len(self)
        if self.weight is None:
            return np.full(n, 1.0 / n)
        total = self.weight.sum()
        if total <= 0:
            raise ValidationError("weights sum to zero")
        return self.weight / total

    def patient_types(self, r: float = 1.0) -> np.ndarray:
        return patient_type_array(self.t1_0, self.t2_0, self.t1_1, self.t2_1, r)

    def world(self, a: int) -> tuple[np.ndarray, np.ndarray]:
        return (self.t1_0, self.t2_0) if a == 0 else (self.t1_1, self.t2_1)
