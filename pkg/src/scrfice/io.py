"""CSV and config-file reading and writing."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .curves import fmt
from .domain import ProfileTable, ValidationError
from .models import weibull_arm
from .simulate import SCENARIOS, CohortSpec, FrailtyConfig, SimulatedCohort

OBSERVED_COLUMNS = ("id", "treat", "y1", "d1", "y2", "d2")
PROFILE_COLUMNS = ("id", "t1_0", "t2_0", "t1_1", "t2_1", "gamma0", "gamma1")


class InputError(OSError):
    """A file is missing or unreadable."""


@dataclass
class ObservedData:
    """Column store of observed records (one row per subject)."""

    ids: np.ndarray
    treat: np.ndarray
    y1: np.ndarray
    d1: np.ndarray
    y2: np.ndarray
    d2: np.ndarray
    x: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        n = len(self.ids)
        self.ids = np.asarray(self.ids).astype(str)
        self.treat = np.asarray(self.treat, dtype=np.int64)
        self.d1 = np.asarray(self.d1, dtype=np.int64)
        self.d2 = np.asarray(self.d2, dtype=np.int64)
        self.y1 = np.asarray(self.y1, dtype=float)
        self.y2 = np.asarray(self.y2, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        if not self.names:
            self.names = tuple(f"x{j + 1}" for j in range(self.x.shape[1]))
        if len(self.names) != self.x.shape[1]:
            raise ValidationError("covariate names do not match the covariate columns")
        validate_observed(self.treat, self.y1, self.d1, self.y2, self.d2, self.x)
        if len(np.unique(self.ids)) != n:
            raise ValidationError("subject ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "ObservedData":
        idx = np.asarray(idx, dtype=np.int64)
        ids = self.ids[idx]
        if len(np.unique(idx)) != len(idx):
            # bootstrap duplicates need fresh ids
            ids = np.array([f"{s}#{k}" for k, s in enumerate(ids)])
        return ObservedData(ids, self.treat[idx], self.y1[idx], self.d1[idx], self.y2[idx], self.d2[idx],
                            self.x[idx], self.names)

    def arm(self, a: int) -> dict:
        m = self.treat == a
        return {"x": self.x[m], "y1": self.y1[m], "d1": self.d1[m], "y2": self.y2[m], "d2": self.d2[m]}

    @classmethod
    def from_cohort(cls, cohort: SimulatedCohort) -> "ObservedData":
        return cls(cohort.ids.astype(str), cohort.treat, cohort.y1, cohort.d1, cohort.y2, cohort.d2, cohort.x)


def validate_observed(treat, y1, d1, y2, d2, x) -> None:
    """Vectorised record checks; raises on the first offending row."""
    checks = [
        (~np.isin(treat, (0, 1)), "treat must be 0 or 1"),
        (~np.isin(d1, (0, 1)) | ~np.isin(d2, (0, 1)), "event indicators must be 0 or 1"),
        (~((0 < y1) & (y1 <= y2) & (y2 <= 1)), "need 0 < y1 <= y2 <= 1"),
        ((d1 == 0) & (y1 != y2), "without infection y1 must equal y2"),
        (~np.all(np.isfinite(x), axis=1), "covariates must be finite"),
    ]
    for bad, msg in checks:
        if np.any(bad):
            raise ValidationError(f"row {int(np.argmax(bad)) + 1}: {msg}")


def _open_text(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _num(s: str, row: int, col: str) -> float:
    if s.strip() == "":
        return math.inf
    try:
        return float(s)
    except ValueError:
        raise ValidationError(f"row {row}: column {col!r} is not a number: {s!r}") from None


def read_observed_csv(path) -> ObservedData:
    rows = list(csv.reader(io.StringIO(_open_text(path))))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:6]) != OBSERVED_COLUMNS:
        raise ValidationError(f"{path}: header must start with {', '.join(OBSERVED_COLUMNS)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise ValidationError(f"{path}: no records")
    width = len(header)
    for i, r in enumerate(body, start=2):
        if len(r) != width:
            raise ValidationError(f"{path}: line {i} has {len(r)} fields, expected {width}")
    vals = np.array([[_num(v, i, header[j]) for j, v in enumerate(r[1:], start=1)] for i, r in enumerate(body, 2)])
    vals = vals.reshape(len(body), width - 1)
    if np.any(~np.isfinite(vals)):
        raise ValidationError(f"{path}: observed data must not contain empty or infinite values")
    for j, name in ((0, "treat"), (2, "d1"), (4, "d2")):
        if np.any(vals[:, j] != np.round(vals[:, j])):
            raise ValidationError(f"{path}: {name} must be an integer")
    return ObservedData(
        np.array([r[0] for r in body]), vals[:, 0].astype(np.int64), vals[:, 1], vals[:, 2].astype(np.int64),
        vals[:, 3], vals[:, 4].astype(np.int64), vals[:, 5:], tuple(header[6:]),
    )


def observed_csv(data: ObservedData) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(OBSERVED_COLUMNS) + list(data.names))
    for i in range(len(data)):
        w.writerow([data.ids[i], int(data.treat[i]), fmt(data.y1[i]), int(data.d1[i]), fmt(data.y2[i]),
                    int(data.d2[i])] + [fmt(v) for v in data.x[i]])
    return buf.getvalue()


def _po_cell(v) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def profiles_csv(profiles: ProfileTable, ids=None) -> str:
    """Potential-outcomes CSV; a never-occurring event is an empty cell."""
    n = len(profiles)
    ids = np.arange(n).astype(str) if ids is None else np.asarray(ids).astype(str)
    g0 = profiles.gamma0 if profiles.gamma0 is not None else np.full(n, np.nan)
    g1 = profiles.gamma1 if profiles.gamma1 is not None else np.full(n, np.nan)
    cols = (profiles.t1_0, profiles.t2_0, profiles.t1_1, profiles.t2_1, g0, g1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_COLUMNS)
    for i in range(n):
        w.writerow([ids[i]] + [_po_cell(c[i]) for c in cols])
    return buf.getvalue()


def read_profiles_csv(path) -> ProfileTable:
    rows = list(csv.reader(io.StringIO(_open_text(path))))
    if not rows or tuple(h.strip() for h in rows[0]) != PROFILE_COLUMNS:
        raise ValidationError(f"{path}: header must be {', '.join(PROFILE_COLUMNS)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise ValidationError(f"{path}: no profiles")
    if any(len(r) != len(PROFILE_COLUMNS) for r in body):
        raise ValidationError(f"{path}: every line needs {len(PROFILE_COLUMNS)} fields")
    vals = np.array([[_num(v, i, PROFILE_COLUMNS[j]) for j, v in enumerate(r[1:], 1)] for i, r in enumerate(body, 2)])
    gam = np.where(np.isinf(vals[:, 4:]), np.nan, vals[:, 4:])
    return ProfileTable(vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3], gamma0=gam[:, 0], gamma1=gam[:, 1],
                        ids=np.array([r[0] for r in body]))


def load_config(path) -> dict:
    """Read a YAML mapping; a missing file is an :class:`InputError`."""
    try:
        d = yaml.safe_load(_open_text(path))
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML: {exc}") from None
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return d


def cohort_spec_from_dict(d: dict, n: int, seed: int) -> CohortSpec:
    """Custom cohort from a config mapping.

    ``arms`` maps ``0``/``1`` to ``{"01": [shape, scale, [beta...]], ...}``
    (or a scenario name to borrow its arms); ``theta0``, ``theta1`` and
    ``rho`` give the frailty; ``covariates``, ``p``, ``treatment`` and
    ``censoring`` pass through to :class:`CohortSpec`.
    """
    arms_src = d.get("arms", "scenario-a")
    if isinstance(arms_src, str):
        if arms_src not in SCENARIOS:
            raise ValidationError(f"unknown scenario {arms_src!r}")
        arms_src = SCENARIOS[arms_src]
    theta0 = float(d.get("theta0", d.get("theta", 1.0)))
    theta1 = float(d.get("theta1", d.get("theta", 1.0)))
    try:
        arms = {a: weibull_arm(arms_src.get(a, arms_src.get(str(a))), (theta0, theta1)[a]) for a in (0, 1)}
    except (TypeError, KeyError, ValueError) as exc:
        raise ValidationError(f"bad arm specification: {exc}") from None
    kw = {k: d[k] for k in ("covariates", "p", "treatment", "censoring", "common_randomness") if k in d}
    return CohortSpec(n=n, arms=arms, frailty=FrailtyConfig(theta0, theta1, float(d.get("rho", 0.0))), seed=seed, **kw)


def file_digest(paths) -> dict:
    """SHA-256 of each input file, keyed by the path as given."""
    out = {}
    for p in paths:
        h = hashlib.sha256()
        try:
            with open(p, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
        except OSError as exc:
            raise InputError(f"cannot read {p}: {exc.strerror or exc}") from exc
        out[str(p)] = h.hexdigest()
    return out
